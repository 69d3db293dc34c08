#include "qdiff/search.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {

using nlohmann::json;

std::vector<double> sample_vector(const DistortionBounds& bounds, Rng& rng) {
    std::vector<double> v(bounds.ranges.size());
    for (std::size_t c = 0; c < v.size(); ++c)
        v[c] = rng.uniform(bounds.ranges[c].first, bounds.ranges[c].second);
    return v;
}

double clamp_to(double v, double lo, double hi) {
    return std::min(std::max(v, lo), hi);
}

class PsoOptimizer final : public Optimizer {
  public:
    PsoOptimizer(const DistortionBounds& bounds, Rng rng, const PsoConfig& cfg)
        : bounds_(bounds), rng_(rng), cfg_(cfg) {}

    std::vector<std::vector<double>> init(std::size_t population) override {
        positions_.assign(population, {});
        for (auto& x : positions_) x = sample_vector(bounds_, rng_);
        velocities_.assign(population,
                           std::vector<double>(bounds_.ranges.size(), 0.0));
        pbest_.clear();
        pbest_fit_.clear();
        gbest_fit_ = -std::numeric_limits<double>::infinity();
        return positions_;
    }

    std::vector<std::vector<double>> step(
        const std::vector<std::vector<double>>& population,
        const std::vector<double>& fitness) override {
        positions_ = population;
        if (pbest_.empty()) {
            pbest_ = positions_;
            pbest_fit_ = fitness;
        } else {
            for (std::size_t i = 0; i < positions_.size(); ++i) {
                if (fitness[i] > pbest_fit_[i]) {
                    pbest_[i] = positions_[i];
                    pbest_fit_[i] = fitness[i];
                }
            }
        }
        for (std::size_t i = 0; i < positions_.size(); ++i) {
            if (pbest_fit_[i] > gbest_fit_) {
                gbest_ = pbest_[i];
                gbest_fit_ = pbest_fit_[i];
            }
        }
        for (std::size_t i = 0; i < positions_.size(); ++i) {
            for (std::size_t c = 0; c < bounds_.ranges.size(); ++c) {
                double r1 = rng_.next_double();
                double r2 = rng_.next_double();
                double range =
                    bounds_.ranges[c].second - bounds_.ranges[c].first;
                double vmax = cfg_.velocity_clamp * range;
                double v = cfg_.inertia * velocities_[i][c] +
                           cfg_.cognitive * r1 * (pbest_[i][c] - positions_[i][c]) +
                           cfg_.social * r2 * (gbest_[c] - positions_[i][c]);
                v = clamp_to(v, -vmax, vmax);
                velocities_[i][c] = v;
                positions_[i][c] =
                    clamp_to(positions_[i][c] + v, bounds_.ranges[c].first,
                             bounds_.ranges[c].second);
            }
        }
        return positions_;
    }

  private:
    DistortionBounds bounds_;
    Rng rng_;
    PsoConfig cfg_;
    std::vector<std::vector<double>> positions_;
    std::vector<std::vector<double>> velocities_;
    std::vector<std::vector<double>> pbest_;
    std::vector<double> pbest_fit_;
    std::vector<double> gbest_;
    double gbest_fit_ = -std::numeric_limits<double>::infinity();
};

class GaOptimizer final : public Optimizer {
  public:
    GaOptimizer(const DistortionBounds& bounds, Rng rng, const GaConfig& cfg)
        : bounds_(bounds), rng_(rng), cfg_(cfg) {}

    std::vector<std::vector<double>> init(std::size_t population) override {
        std::vector<std::vector<double>> pop(population);
        for (auto& x : pop) x = sample_vector(bounds_, rng_);
        return pop;
    }

    std::vector<std::vector<double>> step(
        const std::vector<std::vector<double>>& population,
        const std::vector<double>& fitness) override {
        std::size_t p = population.size();
        std::vector<std::size_t> order(p);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) {
                             return fitness[a] > fitness[b];
                         });
        std::size_t elite = std::min<std::size_t>(cfg_.elitism, p);
        // Elites re-enter in their original index order so elitism == p is
        // exactly the identity configuration.
        std::vector<std::size_t> keep(order.begin(),
                                      order.begin() + static_cast<long>(elite));
        std::sort(keep.begin(), keep.end());
        std::vector<std::vector<double>> next;
        next.reserve(p);
        for (std::size_t idx : keep) next.push_back(population[idx]);
        while (next.size() < p) {
            std::size_t a = tournament(fitness);
            std::size_t b = tournament(fitness);
            std::vector<double> child = population[a];
            for (std::size_t c = 0; c < child.size(); ++c)
                if (rng_.bernoulli(cfg_.crossover_rate))
                    child[c] = population[b][c];
            for (std::size_t c = 0; c < child.size(); ++c) {
                if (rng_.bernoulli(cfg_.mutation_rate)) {
                    double range =
                        bounds_.ranges[c].second - bounds_.ranges[c].first;
                    child[c] +=
                        rng_.gaussian(0.0, cfg_.mutation_scale * range);
                }
                child[c] = clamp_to(child[c], bounds_.ranges[c].first,
                                    bounds_.ranges[c].second);
            }
            next.push_back(std::move(child));
        }
        return next;
    }

  private:
    std::size_t tournament(const std::vector<double>& fitness) {
        std::size_t best = rng_.index(fitness.size());
        for (std::uint32_t t = 1; t < cfg_.tournament; ++t) {
            std::size_t cand = rng_.index(fitness.size());
            if (fitness[cand] > fitness[best]) best = cand;
        }
        return best;
    }

    DistortionBounds bounds_;
    Rng rng_;
    GaConfig cfg_;
};

class RandomOptimizer final : public Optimizer {
  public:
    RandomOptimizer(const DistortionBounds& bounds, Rng rng)
        : bounds_(bounds), rng_(rng) {}

    std::vector<std::vector<double>> init(std::size_t population) override {
        std::vector<std::vector<double>> pop(population);
        for (auto& x : pop) x = sample_vector(bounds_, rng_);
        return pop;
    }

    std::vector<std::vector<double>> step(
        const std::vector<std::vector<double>>& population,
        const std::vector<double>&) override {
        return init(population.size());
    }

  private:
    DistortionBounds bounds_;
    Rng rng_;
};

}  // namespace

const char* optimizer_name(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::pso: return "pso";
        case OptimizerKind::ga: return "ga";
        case OptimizerKind::random_search: return "random";
    }
    return "pso";
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "pso") return OptimizerKind::pso;
    if (name == "ga") return OptimizerKind::ga;
    if (name == "random") return OptimizerKind::random_search;
    throw ConfigError("unknown optimizer '" + name +
                      "' (expected pso, ga or random)");
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind,
                                          const DistortionBounds& bounds,
                                          Rng rng, const PsoConfig& pso,
                                          const GaConfig& ga) {
    if (bounds.ranges.empty())
        throw ConfigError("optimizer bounds are empty");
    switch (kind) {
        case OptimizerKind::pso:
            if (pso.inertia < 0.0 || pso.inertia > 1.0)
                throw ConfigError("pso.inertia: must be in [0, 1]");
            if (pso.cognitive < 0.0 || pso.social < 0.0)
                throw ConfigError("pso.cognitive/social: must be >= 0");
            if (pso.velocity_clamp <= 0.0)
                throw ConfigError("pso.velocity_clamp: must be > 0");
            return std::make_unique<PsoOptimizer>(bounds, rng, pso);
        case OptimizerKind::ga:
            if (ga.crossover_rate < 0.0 || ga.crossover_rate > 1.0)
                throw ConfigError("ga.crossover_rate: must be in [0, 1]");
            if (ga.mutation_rate < 0.0 || ga.mutation_rate > 1.0)
                throw ConfigError("ga.mutation_rate: must be in [0, 1]");
            if (ga.mutation_scale < 0.0)
                throw ConfigError("ga.mutation_scale: must be >= 0");
            if (ga.tournament < 2)
                throw ConfigError("ga.tournament: must be >= 2");
            return std::make_unique<GaOptimizer>(bounds, rng, ga);
        case OptimizerKind::random_search:
            return std::make_unique<RandomOptimizer>(bounds, rng);
    }
    throw ConfigError("unknown optimizer kind");
}

DiiTracker::DiiTracker(std::string path, std::size_t threshold_bytes)
    : path_(std::move(path)), threshold_(threshold_bytes) {
    if (path_.empty()) throw ConfigError("offload path: must not be empty");
    if (threshold_ == 0)
        throw ConfigError("offload threshold: must be positive");
}

void DiiTracker::append(const DiiRecord& record) {
    auto bytes = encode_dii_record(record);
    if (!buffer_.empty() && buffer_.size() + bytes.size() > threshold_)
        flush();
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
    ++count_;
    // A single record larger than the threshold still may not stay resident.
    if (buffer_.size() > threshold_) flush();
}

void DiiTracker::flush() {
    if (buffer_.empty()) return;
    if (!file_started_) {
        write_file_bytes(path_,
                         std::vector<std::uint8_t>(kDiiMagic, kDiiMagic + 8));
        file_started_ = true;
    }
    append_file_bytes(path_, buffer_);
    buffer_.clear();
}

void SessionConfig::validate() const {
    bool heuristic = optimizer != OptimizerKind::random_search;
    if (heuristic && population < 2)
        throw ConfigError("population: must be >= 2 for pso/ga");
    if (population < 1) throw ConfigError("population: must be >= 1");
    if (max_iterations < 1) throw ConfigError("max_iterations: must be >= 1");
    if (batch_mode && batch_size < 1)
        throw ConfigError("batch_size: must be >= 1 in batch mode");
    if (!(psnr_threshold > 0.0) || !std::isfinite(psnr_threshold))
        throw ConfigError("psnr_threshold: must be a positive number of dB");
    if (offload_threshold == 0)
        throw ConfigError("offload_threshold: must be positive");
    if (optimizer == OptimizerKind::pso) {
        if (pso.inertia < 0.0 || pso.inertia > 1.0)
            throw ConfigError("pso.inertia: must be in [0, 1]");
        if (pso.cognitive <= 0.0) throw ConfigError("pso.cognitive: must be > 0");
        if (pso.social <= 0.0) throw ConfigError("pso.social: must be > 0");
        if (pso.velocity_clamp <= 0.0 || pso.velocity_clamp > 1.0)
            throw ConfigError("pso.velocity_clamp: must be in (0, 1]");
    }
    if (optimizer == OptimizerKind::ga) {
        if (ga.crossover_rate < 0.0 || ga.crossover_rate > 1.0)
            throw ConfigError("ga.crossover_rate: must be in [0, 1]");
        if (ga.mutation_rate < 0.0 || ga.mutation_rate > 1.0)
            throw ConfigError("ga.mutation_rate: must be in [0, 1]");
        if (ga.mutation_scale < 0.0)
            throw ConfigError("ga.mutation_scale: must be >= 0");
        if (ga.tournament < 2) throw ConfigError("ga.tournament: must be >= 2");
        if (ga.elitism >= population)
            throw ConfigError("ga.elitism: must be < population");
    }
    if (paths.model.empty()) throw ConfigError("paths.model: required");
    if (paths.quantized.empty()) throw ConfigError("paths.quantized: required");
    if (paths.patches.empty()) throw ConfigError("paths.patches: required");
    if (objective == Objective::coverage && paths.intervals.empty())
        throw ConfigError("paths.intervals: required for the cov objective");
}

namespace {

const json& need(const json& j, const char* name, const std::string& where) {
    auto it = j.find(name);
    if (it == j.end())
        throw ConfigError("session config: missing field '" + where + name +
                          "'");
    return *it;
}

template <typename T>
T get_as(const json& j, const char* name, const std::string& where) {
    try {
        return need(j, name, where).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("session config: field '" + where + name +
                          "': " + e.what());
    }
}

template <typename T>
T get_or(const json& j, const char* name, const std::string& where, T fallback) {
    if (j.find(name) == j.end()) return fallback;
    return get_as<T>(j, name, where);
}

std::string resolve_path(const std::string& base_dir, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return p;
    return (std::filesystem::path(base_dir) / fp).string();
}

}  // namespace

SessionConfig load_session_config(const std::string& path) {
    auto bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw ConfigError("session config " + path + ": " + e.what());
    }
    if (get_or<std::string>(j, "format", "", "") != "qdiff-session")
        throw ConfigError("session config " + path +
                          ": format tag is not 'qdiff-session'");
    if (get_or<int>(j, "version", "", 1) != 1)
        throw ConfigError("session config " + path + ": unsupported version");

    SessionConfig cfg;
    cfg.objective = objective_from_name(get_as<std::string>(j, "objective", ""));
    cfg.optimizer = optimizer_from_name(get_as<std::string>(j, "optimizer", ""));
    std::string mode = get_or<std::string>(j, "mode", "", "single");
    if (mode == "single") {
        cfg.batch_mode = false;
    } else if (mode == "batch") {
        cfg.batch_mode = true;
        cfg.batch_size = get_as<std::uint32_t>(j, "batch_size", "");
    } else {
        throw ConfigError(
            "session config: field 'mode': expected 'single' or 'batch'");
    }
    cfg.population = get_as<std::uint32_t>(j, "population", "");
    cfg.max_iterations = get_as<std::uint32_t>(j, "max_iterations", "");
    cfg.psnr_threshold = get_or<double>(j, "psnr_threshold", "", 20.0);
    cfg.early_stop_window = get_or<std::uint32_t>(j, "early_stop_window", "", 5);
    cfg.rng_seed = get_or<std::uint64_t>(j, "rng_seed", "", 1);
    cfg.max_seeds = get_or<std::uint32_t>(j, "max_seeds", "", 0);
    cfg.jaccard = jaccard_kind_from_name(
        get_or<std::string>(j, "jaccard", "", "damped"));
    cfg.offload_threshold = get_or<std::size_t>(j, "offload_threshold_bytes",
                                                "", kDefaultOffloadThreshold);
    if (auto it = j.find("pso"); it != j.end()) {
        const json& p = *it;
        cfg.pso.inertia = get_or<double>(p, "inertia", "pso.", cfg.pso.inertia);
        cfg.pso.cognitive =
            get_or<double>(p, "cognitive", "pso.", cfg.pso.cognitive);
        cfg.pso.social = get_or<double>(p, "social", "pso.", cfg.pso.social);
        cfg.pso.velocity_clamp =
            get_or<double>(p, "velocity_clamp", "pso.", cfg.pso.velocity_clamp);
    }
    if (auto it = j.find("ga"); it != j.end()) {
        const json& g = *it;
        cfg.ga.crossover_rate =
            get_or<double>(g, "crossover_rate", "ga.", cfg.ga.crossover_rate);
        cfg.ga.mutation_rate =
            get_or<double>(g, "mutation_rate", "ga.", cfg.ga.mutation_rate);
        cfg.ga.mutation_scale =
            get_or<double>(g, "mutation_scale", "ga.", cfg.ga.mutation_scale);
        cfg.ga.tournament =
            get_or<std::uint32_t>(g, "tournament", "ga.", cfg.ga.tournament);
        cfg.ga.elitism =
            get_or<std::uint32_t>(g, "elitism", "ga.", cfg.ga.elitism);
    }
    const json& paths = need(j, "paths", "");
    std::string base_dir =
        std::filesystem::path(path).parent_path().string();
    cfg.paths.model =
        resolve_path(base_dir, get_as<std::string>(paths, "model", "paths."));
    cfg.paths.quantized = resolve_path(
        base_dir, get_as<std::string>(paths, "quantized", "paths."));
    cfg.paths.patches = resolve_path(
        base_dir, get_as<std::string>(paths, "patches", "paths."));
    cfg.paths.intervals = resolve_path(
        base_dir, get_or<std::string>(paths, "intervals", "paths.", ""));
    cfg.paths.bounds = resolve_path(
        base_dir, get_or<std::string>(paths, "bounds", "paths.", ""));
    cfg.validate();
    return cfg;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                          std::uint64_t c) {
    std::uint64_t h = Rng::mix(base ^ 0x5851F42D4C957F2Dull);
    h = Rng::mix(h ^ Rng::mix(a + 1));
    h = Rng::mix(h ^ Rng::mix(b + 1));
    h = Rng::mix(h ^ Rng::mix(c + 1));
    return h;
}

bool early_stop(const std::vector<std::pair<double, std::uint64_t>>& history,
                std::uint32_t window) {
    if (window == 0) return false;
    if (history.size() < static_cast<std::size_t>(window) + 1) return false;
    const auto& past = history[history.size() - 1 - window];
    const auto& now = history.back();
    return std::abs(now.first - past.first) <= 1e-9 &&
           now.second == past.second;
}

namespace {

// Evaluates candidates [0, n) into `results`, splitting the index range over
// `threads` workers. Results land at fixed indices, so thread count cannot
// change anything downstream.
void evaluate_all(const Evaluator& evaluator,
                  const std::vector<std::vector<float>>& candidates,
                  const std::vector<std::uint64_t>& seeds,
                  const std::vector<std::uint32_t>& patch_ids,
                  std::uint32_t threads, std::vector<EvalResult>& results) {
    std::size_t n = candidates.size();
    results.assign(n, {});
    std::size_t workers = std::max<std::size_t>(
        1, std::min<std::size_t>(threads == 0 ? 1 : threads, n));
    auto run_range = [&](std::size_t lo, std::size_t hi,
                         std::exception_ptr& err) {
        try {
            for (std::size_t i = lo; i < hi; ++i)
                results[i] = evaluator.evaluate(candidates[i], patch_ids,
                                                seeds[i]);
        } catch (...) {
            err = std::current_exception();
        }
    };
    if (workers == 1) {
        std::exception_ptr err;
        run_range(0, n, err);
        if (err) std::rethrow_exception(err);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(workers);
    std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t lo = w * chunk;
        std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(run_range, lo, hi, std::ref(errs[w]));
    }
    for (auto& t : pool) t.join();
    for (auto& err : errs)
        if (err) std::rethrow_exception(err);
}

}  // namespace

SessionReport run_session(const SessionConfig& config, const PatchSet& patches,
                          const ModelSpec& model, const QuantizedModel& qmodel,
                          const NeuronIntervals* intervals,
                          const DistortionBounds* bounds,
                          const std::string& offload_path,
                          std::uint32_t threads, const SessionHooks* hooks) {
    config.validate();
    if (patches.empty()) throw ConfigError("patch set: must not be empty");
    const Patch3D& first = patches.patches.front();
    Layout layout = build_layout({first.d1, first.d2, first.d3});
    DistortionBounds effective_bounds =
        bounds ? *bounds : DistortionBounds::defaults(layout);
    Evaluator evaluator(model, qmodel, intervals, layout, effective_bounds,
                        patches, config.objective, config.jaccard,
                        config.psnr_threshold);
    std::vector<std::uint32_t> eligible = evaluator.eligible_patches();
    if (eligible.empty())
        throw ConfigError(
            "patch set: the full-precision model classifies no patch "
            "correctly, so there is no admissible search seed");

    std::vector<std::vector<std::uint32_t>> runs;
    if (config.batch_mode) {
        if (eligible.size() < config.batch_size)
            throw ConfigError("batch_size: " + std::to_string(config.batch_size) +
                              " exceeds the " + std::to_string(eligible.size()) +
                              " eligible patches");
        runs.emplace_back(eligible.begin(),
                          eligible.begin() + config.batch_size);
    } else {
        std::size_t n = eligible.size();
        if (config.max_seeds != 0)
            n = std::min<std::size_t>(n, config.max_seeds);
        for (std::size_t i = 0; i < n; ++i)
            runs.push_back({eligible[i]});
    }

    SessionReport report;
    report.optimizer = optimizer_name(config.optimizer);
    report.objective = objective_name(config.objective);
    report.mode = config.batch_mode
                      ? "batch:" + std::to_string(config.batch_size)
                      : "single";
    report.population = config.population;
    report.max_iterations = config.max_iterations;
    report.psnr_threshold = config.psnr_threshold;
    report.rng_seed = config.rng_seed;
    report.model_hash = model_hash(model);
    report.quantized_source_hash = qmodel.source_model_hash;
    report.offload_file = offload_path;

    DiiTracker tracker(offload_path, config.offload_threshold);
    bool aborted = false;

    for (std::size_t run_i = 0; run_i < runs.size() && !aborted; ++run_i) {
        const std::vector<std::uint32_t>& ids = runs[run_i];
        EvalCountClock fallback_clock;
        SessionClock* clock =
            hooks && hooks->clock ? hooks->clock : &fallback_clock;
        if (report.time_unit.empty()) report.time_unit = clock->unit();

        Rng optimizer_rng(config.rng_seed, 1000000 + run_i);
        std::unique_ptr<Optimizer> optimizer =
            hooks && hooks->optimizer_factory
                ? hooks->optimizer_factory(config.optimizer, effective_bounds,
                                           optimizer_rng)
                : make_optimizer(config.optimizer, effective_bounds,
                                 optimizer_rng, config.pso, config.ga);
        std::vector<std::vector<double>> population =
            optimizer->init(config.population);
        if (population.size() != config.population)
            throw ConfigError("optimizer: produced a population of " +
                              std::to_string(population.size()) +
                              " instead of " +
                              std::to_string(config.population));

        SeedRun seed;
        seed.ordinal = static_cast<std::uint32_t>(run_i);
        seed.patch_ids = ids;
        std::vector<std::pair<double, std::uint64_t>> history;
        double best = -std::numeric_limits<double>::infinity();
        double start = clock->now();
        try {
            for (std::uint32_t gen = 0; gen < config.max_iterations; ++gen) {
                std::vector<std::vector<float>> candidates(config.population);
                std::vector<std::uint64_t> decode_seeds(config.population);
                for (std::uint32_t i = 0; i < config.population; ++i) {
                    candidates[i].assign(population[i].begin(),
                                         population[i].end());
                    decode_seeds[i] =
                        derive_seed(config.rng_seed, run_i, gen, i);
                }
                std::vector<EvalResult> results;
                evaluate_all(evaluator, candidates, decode_seeds, ids, threads,
                             results);
                std::vector<double> fitness(config.population);
                for (std::uint32_t i = 0; i < config.population; ++i) {
                    fitness[i] = results[i].fitness;
                    clock->on_evaluation(ids.size());
                    seed.generated += ids.size();
                    for (const EvalDetail& d : results[i].details) {
                        if (d.valid) ++seed.valid;
                        if (!d.dii) continue;
                        tracker.append({decode_seeds[i], d.patch_index,
                                        candidates[i], d.label_original,
                                        d.label_o, d.label_q});
                        ++seed.dii;
                        if (!seed.first_time)
                            seed.first_time = clock->now() - start;
                    }
                    best = std::max(best, fitness[i]);
                }
                seed.best_trace.push_back(best);
                seed.generations = gen + 1;
                history.emplace_back(best, seed.dii);
                if (early_stop(history, config.early_stop_window)) break;
                if (gen + 1 < config.max_iterations) {
                    population = optimizer->step(population, fitness);
                    if (population.size() != config.population)
                        throw ConfigError(
                            "optimizer: population size changed mid-run");
                }
            }
        } catch (const IoError&) {
            aborted = true;
        }
        seed.total_time = clock->now() - start;
        report.seeds.push_back(std::move(seed));
    }
    try {
        tracker.flush();
    } catch (const IoError&) {
        aborted = true;
    }
    report.aborted = aborted;
    return report;
}

}  // namespace qdiff
