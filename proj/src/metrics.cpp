#include "qdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {

using nlohmann::json;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

double median(std::vector<double> xs) {
    if (xs.empty()) throw ConfigError("median of an empty sample");
    std::sort(xs.begin(), xs.end());
    std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::vector<double> divergence_rate_per_seed(const SessionReport& report) {
    std::vector<double> out;
    out.reserve(report.seeds.size());
    for (const SeedRun& s : report.seeds)
        out.push_back(s.generated == 0
                          ? 0.0
                          : 100.0 * static_cast<double>(s.dii) /
                                static_cast<double>(s.generated));
    return out;
}

double divergence_rate(const SessionReport& report) {
    return median(divergence_rate_per_seed(report));
}

double success_rate(const SessionReport& report) {
    if (report.seeds.empty()) throw ConfigError("report has no seeds");
    std::size_t hits = 0;
    for (const SeedRun& s : report.seeds)
        if (s.dii >= 1) ++hits;
    return 100.0 * static_cast<double>(hits) /
           static_cast<double>(report.seeds.size());
}

std::vector<double> validation_rate_per_seed(const SessionReport& report) {
    std::vector<double> out;
    out.reserve(report.seeds.size());
    for (const SeedRun& s : report.seeds)
        out.push_back(s.generated == 0
                          ? 0.0
                          : 100.0 * static_cast<double>(s.valid) /
                                static_cast<double>(s.generated));
    return out;
}

double validation_rate(const SessionReport& report) {
    return median(validation_rate_per_seed(report));
}

std::optional<double> fdi(const SessionReport& report, bool successful_only) {
    std::vector<double> times;
    for (const SeedRun& s : report.seeds) {
        if (s.dii >= 1) {
            times.push_back(s.first_time ? *s.first_time : s.total_time);
        } else if (!successful_only) {
            times.push_back(s.total_time);
        }
    }
    if (times.empty()) return std::nullopt;
    return median(std::move(times));
}

A12Result vargha_delaney_a12(const std::vector<double>& group1,
                             const std::vector<double>& group2) {
    if (group1.empty() || group2.empty())
        throw ConfigError("effect size needs two non-empty groups");
    double wins = 0.0;
    for (double x : group1)
        for (double y : group2) {
            if (x > y)
                wins += 1.0;
            else if (x == y)
                wins += 0.5;
        }
    A12Result r;
    r.a12 = wins / (static_cast<double>(group1.size()) *
                    static_cast<double>(group2.size()));
    r.scaled = 2.0 * std::abs(r.a12 - 0.5);
    if (r.scaled < 0.147)
        r.magnitude = "negligible";
    else if (r.scaled < 0.33)
        r.magnitude = "small";
    else if (r.scaled < 0.474)
        r.magnitude = "medium";
    else
        r.magnitude = "large";
    return r;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ConfigError("signed-rank test needs paired samples of equal "
                          "length");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    WilcoxonResult res;
    res.n = diffs.size();
    if (diffs.empty()) {
        res.degenerate = true;
        return res;
    }

    // Rank |d| with tie averaging. Doubled ranks stay integral, which keeps
    // the exact distribution a clean integer convolution.
    std::size_t n = diffs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::abs(diffs[x]) < std::abs(diffs[y]);
    });
    std::vector<long long> rank2(n, 0);
    std::vector<std::size_t> tie_sizes;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n &&
               std::abs(diffs[order[j]]) == std::abs(diffs[order[i]]))
            ++j;
        // positions i..j-1 share the average rank (i+1 + ... + j)/(j-i)
        long long doubled = static_cast<long long>(i + 1 + j);  // 2*avg rank
        for (std::size_t t = i; t < j; ++t) rank2[order[t]] = doubled;
        tie_sizes.push_back(j - i);
        i = j;
    }

    long long w2_plus = 0, w2_total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        w2_total += rank2[i];
        if (diffs[i] > 0.0) w2_plus += rank2[i];
    }
    long long w2_minus = w2_total - w2_plus;
    long long w2_lo = std::min(w2_plus, w2_minus);
    res.w = static_cast<double>(w2_lo) / 2.0;

    if (n <= 25) {
        res.exact = true;
        std::vector<double> dp(static_cast<std::size_t>(w2_total) + 1, 0.0);
        dp[0] = 1.0;
        long long reach = 0;
        for (std::size_t i = 0; i < n; ++i) {
            long long r = rank2[i];
            reach += r;
            for (long long s = reach; s >= r; --s) dp[s] += dp[s - r];
        }
        double low = 0.0, high = 0.0;
        long long w2_hi = w2_total - w2_lo;
        for (long long s = 0; s <= w2_total; ++s) {
            if (s <= w2_lo) low += dp[s];
            if (s >= w2_hi) high += dp[s];
        }
        res.p = std::min(1.0, (low + high) / std::pow(2.0, double(n)));
    } else {
        double nn = static_cast<double>(n);
        double mean = nn * (nn + 1.0) / 4.0;
        double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
        for (std::size_t t : tie_sizes) {
            double tt = static_cast<double>(t);
            var -= (tt * tt * tt - tt) / 48.0;
        }
        double w = res.w;
        double num = std::abs(w - mean) - 0.5;
        if (num < 0.0) num = 0.0;
        double z = num / std::sqrt(var);
        res.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
    return res;
}

SessionReport load_report(const std::string& path) {
    auto bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(path + ": not valid JSON: " + e.what());
    }
    SessionReport r;
    try {
        if (j.at("format").get<std::string>() != "qdiff-report")
            throw FormatError(path + ": not a session report file");
        r.optimizer = j.at("optimizer").get<std::string>();
        r.objective = j.at("objective").get<std::string>();
        r.mode = j.at("mode").get<std::string>();
        r.population = j.at("population").get<std::uint32_t>();
        r.max_iterations = j.at("max_iterations").get<std::uint32_t>();
        r.psnr_threshold = j.at("psnr_threshold").get<double>();
        r.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        r.time_unit = j.at("time_unit").get<std::string>();
        r.model_hash = j.at("model_hash").get<std::string>();
        r.quantized_source_hash =
            j.at("quantized_source_hash").get<std::string>();
        r.offload_file = j.at("offload_file").get<std::string>();
        r.aborted = j.at("aborted").get<bool>();
        for (const auto& sj : j.at("seeds")) {
            SeedRun s;
            s.ordinal = sj.at("ordinal").get<std::uint32_t>();
            s.patch_ids =
                sj.at("patch_ids").get<std::vector<std::uint32_t>>();
            s.generations = sj.at("generations").get<std::uint32_t>();
            s.generated = sj.at("generated").get<std::uint64_t>();
            s.valid = sj.at("valid").get<std::uint64_t>();
            s.dii = sj.at("dii").get<std::uint64_t>();
            if (!sj.at("first_time").is_null())
                s.first_time = sj.at("first_time").get<double>();
            s.total_time = sj.at("total_time").get<double>();
            s.best_trace = sj.at("best_trace").get<std::vector<double>>();
            if (s.valid > s.generated || s.dii > s.valid)
                throw FormatError(path + ": seed " +
                                  std::to_string(s.ordinal) +
                                  " has inconsistent counters");
            r.seeds.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return r;
}

void save_report(const SessionReport& report, const std::string& path) {
    json j;
    j["format"] = "qdiff-report";
    j["version"] = 1;
    j["optimizer"] = report.optimizer;
    j["objective"] = report.objective;
    j["mode"] = report.mode;
    j["population"] = report.population;
    j["max_iterations"] = report.max_iterations;
    j["psnr_threshold"] = report.psnr_threshold;
    j["rng_seed"] = report.rng_seed;
    j["time_unit"] = report.time_unit;
    j["model_hash"] = report.model_hash;
    j["quantized_source_hash"] = report.quantized_source_hash;
    j["offload_file"] = report.offload_file;
    j["aborted"] = report.aborted;
    j["seeds"] = json::array();
    for (const SeedRun& s : report.seeds) {
        json sj;
        sj["ordinal"] = s.ordinal;
        sj["patch_ids"] = s.patch_ids;
        sj["generations"] = s.generations;
        sj["generated"] = s.generated;
        sj["valid"] = s.valid;
        sj["dii"] = s.dii;
        if (s.first_time)
            sj["first_time"] = *s.first_time;
        else
            sj["first_time"] = nullptr;
        sj["total_time"] = s.total_time;
        sj["best_trace"] = s.best_trace;
        j["seeds"].push_back(std::move(sj));
    }
    std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string reports_csv(const std::vector<SessionReport>& reports,
                        const std::vector<std::string>& labels) {
    if (reports.size() != labels.size())
        throw ConfigError("one label per report required");
    std::string out =
        "config,optimizer,objective,seed,patch_ids,generations,generated,"
        "valid,dii,dir_pct,vr_pct,first_time,total_time,time_unit\n";
    for (std::size_t ri = 0; ri < reports.size(); ++ri) {
        const SessionReport& r = reports[ri];
        std::vector<double> dir = divergence_rate_per_seed(r);
        std::vector<double> vr = validation_rate_per_seed(r);
        for (std::size_t si = 0; si < r.seeds.size(); ++si) {
            const SeedRun& s = r.seeds[si];
            std::string ids;
            for (std::size_t k = 0; k < s.patch_ids.size(); ++k) {
                if (k) ids += ';';
                ids += std::to_string(s.patch_ids[k]);
            }
            out += labels[ri] + ',' + r.optimizer + ',' + r.objective + ',' +
                   std::to_string(s.ordinal) + ',' + ids + ',' +
                   std::to_string(s.generations) + ',' +
                   std::to_string(s.generated) + ',' +
                   std::to_string(s.valid) + ',' + std::to_string(s.dii) +
                   ',' + fmt(dir[si]) + ',' + fmt(vr[si]) + ',' +
                   (s.first_time ? fmt(*s.first_time) : std::string()) + ',' +
                   fmt(s.total_time) + ',' + r.time_unit + '\n';
        }
    }
    return out;
}

std::string reports_summary(const std::vector<SessionReport>& reports,
                            const std::vector<std::string>& labels) {
    if (reports.size() != labels.size())
        throw ConfigError("one label per report required");
    std::string out;
    for (std::size_t ri = 0; ri < reports.size(); ++ri) {
        const SessionReport& r = reports[ri];
        out += "== " + labels[ri] + " ==\n";
        out += "optimizer=" + r.optimizer + " objective=" + r.objective +
               " mode=" + r.mode + " seeds=" + std::to_string(r.seeds.size()) +
               "\n";
        auto f = fdi(r, false);
        auto fs = fdi(r, true);
        out += "success_rate=" + fmt(success_rate(r)) + "%" +
               " dir_median=" + fmt(divergence_rate(r)) + "%" +
               " vr_median=" + fmt(validation_rate(r)) + "%" +
               " fdi=" + (f ? fmt(*f) : "n/a") +
               " fdi_star=" + (fs ? fmt(*fs) : "n/a") + " (" + r.time_unit +
               ")\n";
        if (r.aborted) out += "WARNING: partial report, offload aborted\n";
        out += "\n";
    }
    for (std::size_t i = 0; i < reports.size(); ++i)
        for (std::size_t j = i + 1; j < reports.size(); ++j) {
            out += "-- " + labels[i] + " vs " + labels[j] +
                   " (per-seed divergence rate) --\n";
            std::vector<double> gi = divergence_rate_per_seed(reports[i]);
            std::vector<double> gj = divergence_rate_per_seed(reports[j]);
            A12Result a = vargha_delaney_a12(gi, gj);
            out += "a12=" + fmt(a.a12) + " scaled=" + fmt(a.scaled) +
                   " magnitude=" + a.magnitude + "\n";
            if (gi.size() == gj.size()) {
                WilcoxonResult w = wilcoxon_signed_rank(gi, gj);
                if (w.degenerate)
                    out += "wilcoxon: degenerate (all differences zero)\n";
                else
                    out += "wilcoxon: W=" + fmt(w.w) + " p=" + fmt(w.p) +
                           " n=" + std::to_string(w.n) +
                           (w.exact ? " exact" : " normal-approx") + "\n";
            } else {
                out += "wilcoxon: skipped (unequal seed counts)\n";
            }
            out += "\n";
        }
    return out;
}

}  // namespace qdiff
