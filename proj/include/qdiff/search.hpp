#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qdiff/distort.hpp"
#include "qdiff/fitness.hpp"
#include "qdiff/metrics.hpp"
#include "qdiff/patch.hpp"
#include "qdiff/quant.hpp"
#include "qdiff/rng.hpp"

namespace qdiff {

enum class OptimizerKind { pso, ga, random_search };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(const std::string& name);

struct PsoConfig {
    double inertia = 0.7;
    double cognitive = 1.5;
    double social = 1.5;
    double velocity_clamp = 0.2;  // fraction of each component's range
};

struct GaConfig {
    double crossover_rate = 0.9;
    double mutation_rate = 0.1;
    double mutation_scale = 0.1;  // stddev as fraction of the range
    std::uint32_t tournament = 3;
    std::uint32_t elitism = 1;
};

// Population driver: init() yields the first generation, step() the next one
// given the previous generation's fitness (maximized). Emitted vectors are
// always inside the bounds; population size stays constant.
class Optimizer {
  public:
    virtual ~Optimizer() = default;
    virtual std::vector<std::vector<double>> init(std::size_t population) = 0;
    virtual std::vector<std::vector<double>> step(
        const std::vector<std::vector<double>>& population,
        const std::vector<double>& fitness) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind,
                                          const DistortionBounds& bounds,
                                          Rng rng, const PsoConfig& pso,
                                          const GaConfig& ga);

// Session time source. The default counts candidate evaluations, which makes
// timing (and therefore report files) bit-reproducible; WallClock measures
// real seconds instead.
class SessionClock {
  public:
    virtual ~SessionClock() = default;
    virtual void on_evaluation(std::size_t count) = 0;
    virtual double now() const = 0;
    virtual const char* unit() const = 0;
};

class EvalCountClock final : public SessionClock {
  public:
    void on_evaluation(std::size_t count) override {
        t_ += static_cast<double>(count);
    }
    double now() const override { return t_; }
    const char* unit() const override { return "evaluations"; }

  private:
    double t_ = 0.0;
};

class WallClock final : public SessionClock {
  public:
    WallClock() : start_(std::chrono::steady_clock::now()) {}
    void on_evaluation(std::size_t) override {}
    double now() const override {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }
    const char* unit() const override { return "seconds"; }

  private:
    std::chrono::steady_clock::time_point start_;
};

// Buffers difference-inducing records and appends them to the offload file
// whenever the next record would push the buffer past the threshold, so
// resident memory stays bounded. No records -> no file.
class DiiTracker {
  public:
    DiiTracker(std::string path, std::size_t threshold_bytes);

    void append(const DiiRecord& record);
    void flush();

    std::uint64_t dii_count() const { return count_; }
    std::size_t buffered_bytes() const { return buffer_.size(); }
    const std::string& path() const { return path_; }

  private:
    std::string path_;
    std::size_t threshold_;
    std::vector<std::uint8_t> buffer_;
    bool file_started_ = false;
    std::uint64_t count_ = 0;
};

constexpr std::size_t kDefaultOffloadThreshold = 10u * 1024u * 1024u;

struct SessionConfig {
    Objective objective = Objective::divergence;
    OptimizerKind optimizer = OptimizerKind::pso;
    bool batch_mode = false;
    std::uint32_t batch_size = 1;
    std::uint32_t population = 10;
    std::uint32_t max_iterations = 25;
    double psnr_threshold = 20.0;
    std::uint32_t early_stop_window = 5;  // 0 disables early stopping
    std::uint64_t rng_seed = 1;
    std::uint32_t max_seeds = 0;  // single mode: seed patch cap, 0 = all
    JaccardKind jaccard = JaccardKind::damped;
    std::size_t offload_threshold = kDefaultOffloadThreshold;
    PsoConfig pso;
    GaConfig ga;
    struct Paths {
        std::string model;
        std::string quantized;
        std::string intervals;  // required for the cov objective
        std::string patches;
        std::string bounds;  // optional; layout defaults when empty
    } paths;

    void validate() const;  // throws ConfigError naming the offending field
};

SessionConfig load_session_config(const std::string& path);

// Deterministic per-candidate decode seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                          std::uint64_t c);

struct SessionHooks {
    SessionClock* clock = nullptr;  // default: EvalCountClock per seed run
    std::function<std::unique_ptr<Optimizer>(OptimizerKind,
                                             const DistortionBounds&, Rng)>
        optimizer_factory;  // tests can constrain the candidate space
};

// True when both the best fitness and the DII count stayed unchanged (within
// 1e-9) across the trailing `window` generations.
bool early_stop(const std::vector<std::pair<double, std::uint64_t>>& history,
                std::uint32_t window);

// One full search per seed patch (or one batched search): population init,
// decode, fitness for every candidate, validity filter, DII tracking,
// population update, early stop. `threads` parallelizes candidate
// evaluations inside a generation without changing any result.
SessionReport run_session(const SessionConfig& config, const PatchSet& patches,
                          const ModelSpec& model, const QuantizedModel& qmodel,
                          const NeuronIntervals* intervals,
                          const DistortionBounds* bounds,
                          const std::string& offload_path,
                          std::uint32_t threads = 1,
                          const SessionHooks* hooks = nullptr);

}  // namespace qdiff
