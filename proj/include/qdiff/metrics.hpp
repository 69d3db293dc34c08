#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qdiff {

// Outcome of one search run (one seed patch, or one batch).
struct SeedRun {
    std::uint32_t ordinal = 0;
    std::vector<std::uint32_t> patch_ids;
    std::uint32_t generations = 0;
    std::uint64_t generated = 0;
    std::uint64_t valid = 0;
    std::uint64_t dii = 0;
    std::optional<double> first_time;  // time of first disagreement, if any
    double total_time = 0.0;
    std::vector<double> best_trace;  // best-so-far fitness per generation
};

struct SessionReport {
    std::string optimizer;
    std::string objective;
    std::string mode;  // "single" or "batch:<B>"
    std::uint32_t population = 0;
    std::uint32_t max_iterations = 0;
    double psnr_threshold = 20.0;
    std::uint64_t rng_seed = 0;
    std::string time_unit;  // "evaluations" (deterministic) or "seconds"
    std::string model_hash;
    std::string quantized_source_hash;
    std::string offload_file;
    bool aborted = false;
    std::vector<SeedRun> seeds;
};

SessionReport load_report(const std::string& path);
void save_report(const SessionReport& report, const std::string& path);

double median(std::vector<double> xs);

// Per-seed 100*dii/generated, and the across-seed median the tables report.
std::vector<double> divergence_rate_per_seed(const SessionReport& report);
double divergence_rate(const SessionReport& report);

// Percentage of seeds with at least one difference-inducing input.
double success_rate(const SessionReport& report);

std::vector<double> validation_rate_per_seed(const SessionReport& report);
double validation_rate(const SessionReport& report);

// Median time to first disagreement. Penalized form charges unsuccessful
// seeds their full run time; the starred form keeps successful seeds only
// (nullopt when none qualify).
std::optional<double> fdi(const SessionReport& report, bool successful_only);

struct A12Result {
    double a12 = 0.5;
    double scaled = 0.0;  // 2*|a12 - 0.5|
    std::string magnitude;  // negligible / small / medium / large
};

A12Result vargha_delaney_a12(const std::vector<double>& group1,
                             const std::vector<double>& group2);

struct WilcoxonResult {
    double w = 0.0;        // min(W+, W-)
    double p = 1.0;        // two-sided
    std::size_t n = 0;     // non-zero-difference pairs
    bool degenerate = false;  // every difference was zero
    bool exact = false;    // exact distribution (n <= 25) vs normal approx
};

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b);

// `report` CLI rendering: one CSV row per (report, seed), plus a text block
// with per-report medians and pairwise A12/Wilcoxon comparisons.
std::string reports_csv(const std::vector<SessionReport>& reports,
                        const std::vector<std::string>& labels);
std::string reports_summary(const std::vector<SessionReport>& reports,
                            const std::vector<std::string>& labels);

}  // namespace qdiff
