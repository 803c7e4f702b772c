// SPDX-License-Identifier: Apache-2.0
//
// Span-conditioned neuron activation statistics.
//
// For one model and span s, a count table holds C[l][k] (tokens on which gate
// neuron k of layer l fired, i.e. was strictly positive) and N (masked tokens).
// From a table per language:
//   p[lang][l][k] = C / N
//   q[lang][l][k] = p[lang][l][k] / sum_lang' p[lang'][l][k]
//   H[l][k]       = -sum_lang q ln q
// The lowest-entropy floor(rho * L * I) active neurons are candidates; a
// candidate is assigned to language lang when p[lang][l][k] > tau.
//
// Reductions over languages sum the values in ascending order, so relabelling
// or reordering languages never changes a single bit of the result.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wsmerge {

enum class Span { Src, Tgt };

const char * span_name(Span span);
Span parse_span(std::string_view name);

struct TokenRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end > begin ? end - begin : 0; }
    bool empty() const { return end <= begin; }
};

struct SpanAnnotation {
    std::string example_id;
    std::size_t sequence_length = 0;
    TokenRange instruction;
    TokenRange source;
    TokenRange target;
};

struct SpanMasks {
    std::vector<bool> source;
    std::vector<bool> target;
};

// Throws InvalidArgument on out-of-bounds, inverted, overlapping or (for
// source/target) empty ranges.
SpanMasks build_span_masks(const SpanAnnotation & annotation);

// Row-major layers x width matrix of doubles.
struct LayerMatrix {
    std::size_t layers = 0;
    std::size_t width = 0;
    std::vector<double> values;

    LayerMatrix() = default;
    LayerMatrix(std::size_t l, std::size_t w, double fill = 0.0) : layers(l), width(w), values(l * w, fill) {}

    double & at(std::size_t l, std::size_t k) { return values[l * width + k]; }
    double at(std::size_t l, std::size_t k) const { return values[l * width + k]; }
};

struct ActivationCountTable {
    std::string model_id;
    std::string language;
    Span span = Span::Src;
    std::size_t layers = 0;
    std::size_t width = 0;
    std::vector<std::uint64_t> counts;  // layers * width, row-major
    std::uint64_t token_total = 0;

    // token_total > 0, counts sized layers*width, every count <= token_total.
    void validate() const;
};

LayerMatrix activation_probability(const ActivationCountTable & table);

using LanguageMatrices = std::map<std::string, LayerMatrix, std::less<>>;

struct NormalizedRates {
    std::size_t layers = 0;
    std::size_t width = 0;
    LanguageMatrices q;
    // false where every language has p == 0; q is undefined (NaN) there.
    std::vector<bool> active;

    bool is_active(std::size_t l, std::size_t k) const { return active[l * width + k]; }
    std::size_t active_count() const;
};

NormalizedRates cross_language_normalize(const LanguageMatrices & probs);

// NaN for inactive neurons.
LayerMatrix selectivity_entropy(const NormalizedRates & rates);

enum class ThresholdMode { Percentile, Absolute };

struct ThresholdSpec {
    ThresholdMode mode = ThresholdMode::Percentile;
    double value = 0.8;
};

// Nearest-rank percentile: the ceil(level * n)-th smallest value (rank >= 1).
double nearest_rank_percentile(std::vector<double> pooled, double level);

struct SelectivityReport {
    Span span = Span::Src;
    std::vector<std::string> languages;
    std::size_t layers = 0;
    std::size_t width = 0;
    double rho = 0.1;
    ThresholdSpec tau;
    bool pooled_across_spans = false;
    double tau_resolved = 0.0;
    std::size_t active_neurons = 0;
    // (layer, neuron) pairs in ascending (H, layer, neuron) order.
    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    // language -> per-layer ascending neuron indices
    std::map<std::string, std::vector<std::vector<std::uint32_t>>, std::less<>> selected;
    std::vector<std::string> warnings;

    std::vector<std::size_t> layer_counts(std::string_view language) const;
    std::size_t total(std::string_view language) const;
};

// `pooled` overrides the value set the percentile is taken over; by default it
// is every p value in `probs`.
SelectivityReport select_language_neurons(const LayerMatrix & entropy, const NormalizedRates & rates,
                                          const LanguageMatrices & probs, double rho, ThresholdSpec tau,
                                          std::span<const double> pooled = {});

struct SelectivityOptions {
    double rho = 0.1;
    ThresholdSpec tau;
    bool pool_across_spans = false;
    // Restrict to one span; empty means every span with >= 2 languages.
    std::vector<Span> spans;
};

// Groups tables by span (one table per language per span) and runs the full
// pipeline for each span.
std::vector<SelectivityReport> run_selectivity(std::span<const ActivationCountTable> tables,
                                               const SelectivityOptions & options);

struct LayerCountTable {
    Span span = Span::Src;
    std::vector<std::string> languages;
    std::vector<std::vector<std::size_t>> counts;  // [layer][language]
    std::vector<std::size_t> totals;               // [language]
};

LayerCountTable layer_count_report(const SelectivityReport & report);
std::string layer_count_csv(const LayerCountTable & table);
std::string layer_count_json(const LayerCountTable & table);

// Language x span totals, one row per language. With `after`, cells read
// "before->after".
std::string totals_table_csv(std::span<const SelectivityReport> before,
                             std::span<const SelectivityReport> after = {});

std::string selectivity_report_json(std::span<const SelectivityReport> reports);

// Count table files: tensors "counts/src" and/or "counts/tgt" (U32 or I64,
// shape [L, I]) plus a `<path>.json` sidecar with model_id, language,
// token_total {span: N}, L, I, harness_version.
std::vector<ActivationCountTable> read_count_tables(const std::filesystem::path & path);
void write_count_tables(std::span<const ActivationCountTable> tables, const std::filesystem::path & path,
                        std::string_view harness_version = "wsmerge");

} // namespace wsmerge
