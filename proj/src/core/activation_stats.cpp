// SPDX-License-Identifier: Apache-2.0

#include "core/activation_stats.hpp"

#include "core/checkpoint.hpp"
#include "core/error.hpp"
#include "core/fraction.hpp"
#include "core/log.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <set>

namespace wsmerge {

namespace {

using json = nlohmann::json;

// Sum in ascending order of value: independent of how the inputs are ordered.
double canonical_sum(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) {
        s += v;
    }
    return s;
}

void check_range(const char * label, const TokenRange & r, std::size_t length) {
    if (r.begin > r.end || r.end > length) {
        fail(ErrorCode::InvalidArgument, std::string(label) + " range [" + std::to_string(r.begin) + "," +
                                             std::to_string(r.end) + ") is outside [0," + std::to_string(length) +
                                             ")");
    }
}

bool overlaps(const TokenRange & a, const TokenRange & b) {
    return !a.empty() && !b.empty() && a.begin < b.end && b.begin < a.end;
}

std::filesystem::path sidecar_path(const std::filesystem::path & path) {
    std::filesystem::path p = path;
    p += ".json";
    return p;
}

json parse_json_file(const std::filesystem::path & path) {
    const auto raw = read_file_bytes(path);
    try {
        return json::parse(std::string_view(reinterpret_cast<const char *>(raw.data()), raw.size()));
    } catch (const json::exception & e) {
        fail(ErrorCode::MalformedHeader, path.string() + " is not valid JSON: " + e.what());
    }
}

std::string threshold_mode_name(ThresholdMode mode) {
    return mode == ThresholdMode::Percentile ? "percentile" : "absolute";
}

} // namespace

const char * span_name(Span span) {
    return span == Span::Src ? "src" : "tgt";
}

Span parse_span(std::string_view name) {
    if (name == "src") return Span::Src;
    if (name == "tgt") return Span::Tgt;
    fail(ErrorCode::InvalidArgument, "unknown span '" + std::string(name) + "' (expected src or tgt)");
}

SpanMasks build_span_masks(const SpanAnnotation & a) {
    check_range("instruction", a.instruction, a.sequence_length);
    check_range("source", a.source, a.sequence_length);
    check_range("target", a.target, a.sequence_length);
    if (a.source.empty() || a.target.empty()) {
        fail(ErrorCode::InvalidArgument, "example '" + a.example_id + "': source and target spans must be non-empty");
    }
    if (overlaps(a.instruction, a.source) || overlaps(a.instruction, a.target) || overlaps(a.source, a.target)) {
        fail(ErrorCode::InvalidArgument, "example '" + a.example_id + "': span ranges overlap");
    }
    SpanMasks masks;
    masks.source.assign(a.sequence_length, false);
    masks.target.assign(a.sequence_length, false);
    for (std::size_t j = a.source.begin; j < a.source.end; ++j) {
        masks.source[j] = true;
    }
    for (std::size_t j = a.target.begin; j < a.target.end; ++j) {
        masks.target[j] = true;
    }
    return masks;
}

void ActivationCountTable::validate() const {
    const std::string where = "count table (" + language + ", " + span_name(span) + ")";
    if (token_total == 0) {
        fail(ErrorCode::InvalidArgument, where + ": token_total must be positive");
    }
    if (layers == 0 || width == 0) {
        fail(ErrorCode::InvalidArgument, where + ": layer count and width must be positive");
    }
    if (counts.size() != layers * width) {
        fail(ErrorCode::InvalidArgument, where + ": expected " + std::to_string(layers * width) + " counts, got " +
                                             std::to_string(counts.size()));
    }
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] > token_total) {
            fail(ErrorCode::InvalidArgument, where + ": count " + std::to_string(counts[i]) + " at layer " +
                                                 std::to_string(i / width) + ", neuron " + std::to_string(i % width) +
                                                 " exceeds token_total " + std::to_string(token_total));
        }
    }
}

LayerMatrix activation_probability(const ActivationCountTable & table) {
    table.validate();
    LayerMatrix p(table.layers, table.width);
    const double n = static_cast<double>(table.token_total);
    for (std::size_t i = 0; i < table.counts.size(); ++i) {
        p.values[i] = static_cast<double>(table.counts[i]) / n;
    }
    return p;
}

std::size_t NormalizedRates::active_count() const {
    return static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
}

NormalizedRates cross_language_normalize(const LanguageMatrices & probs) {
    if (probs.size() < 2) {
        fail(ErrorCode::InvalidArgument, "cross-language normalisation needs at least two languages");
    }
    const LayerMatrix & first = probs.begin()->second;
    for (const auto & [lang, m] : probs) {
        if (m.layers != first.layers || m.width != first.width || m.values.size() != first.layers * first.width) {
            fail(ErrorCode::Incompatible, "language '" + lang + "' has a " + std::to_string(m.layers) + "x" +
                                              std::to_string(m.width) + " rate matrix, expected " +
                                              std::to_string(first.layers) + "x" + std::to_string(first.width));
        }
    }

    NormalizedRates out;
    out.layers = first.layers;
    out.width = first.width;
    const std::size_t cells = first.layers * first.width;
    out.active.assign(cells, false);
    for (const auto & [lang, m] : probs) {
        out.q.emplace(lang, LayerMatrix(first.layers, first.width, std::numeric_limits<double>::quiet_NaN()));
    }
    std::vector<double> column;
    column.reserve(probs.size());
    for (std::size_t i = 0; i < cells; ++i) {
        column.clear();
        for (const auto & [lang, m] : probs) {
            column.push_back(m.values[i]);
        }
        const double total = canonical_sum(column);
        if (total <= 0.0) {
            continue;
        }
        out.active[i] = true;
        for (const auto & [lang, m] : probs) {
            out.q.find(lang)->second.values[i] = m.values[i] / total;
        }
    }
    return out;
}

LayerMatrix selectivity_entropy(const NormalizedRates & rates) {
    LayerMatrix h(rates.layers, rates.width, std::numeric_limits<double>::quiet_NaN());
    std::vector<double> terms;
    terms.reserve(rates.q.size());
    for (std::size_t i = 0; i < rates.active.size(); ++i) {
        if (!rates.active[i]) {
            continue;
        }
        terms.clear();
        for (const auto & [lang, q] : rates.q) {
            const double v = q.values[i];
            if (v > 0.0) {
                terms.push_back(-v * std::log(v));
            }
        }
        h.values[i] = canonical_sum(terms);
    }
    return h;
}

double nearest_rank_percentile(std::vector<double> pooled, double level) {
    if (pooled.empty()) {
        fail(ErrorCode::InvalidArgument, "percentile of an empty set");
    }
    if (!(level >= 0.0 && level <= 1.0)) {
        fail(ErrorCode::InvalidArgument, "percentile level must lie in [0, 1], got " + std::to_string(level));
    }
    std::sort(pooled.begin(), pooled.end());
    std::size_t rank = fraction_ceil(level, pooled.size());
    rank = std::clamp<std::size_t>(rank, 1, pooled.size());
    return pooled[rank - 1];
}

std::vector<std::size_t> SelectivityReport::layer_counts(std::string_view language) const {
    std::vector<std::size_t> counts(layers, 0);
    auto it = selected.find(language);
    if (it != selected.end()) {
        for (std::size_t l = 0; l < layers; ++l) {
            counts[l] = it->second[l].size();
        }
    }
    return counts;
}

std::size_t SelectivityReport::total(std::string_view language) const {
    const auto counts = layer_counts(language);
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

SelectivityReport select_language_neurons(const LayerMatrix & entropy, const NormalizedRates & rates,
                                          const LanguageMatrices & probs, double rho, ThresholdSpec tau,
                                          std::span<const double> pooled) {
    if (!(rho > 0.0 && rho <= 1.0)) {
        fail(ErrorCode::InvalidArgument, "rho must lie in (0, 1], got " + std::to_string(rho));
    }
    if (entropy.layers != rates.layers || entropy.width != rates.width) {
        fail(ErrorCode::Incompatible, "entropy and rate matrices differ in shape");
    }
    SelectivityReport report;
    report.layers = rates.layers;
    report.width = rates.width;
    report.rho = rho;
    report.tau = tau;
    report.active_neurons = rates.active_count();
    for (const auto & [lang, m] : probs) {
        if (m.layers != rates.layers || m.width != rates.width) {
            fail(ErrorCode::Incompatible, "rate matrix for '" + lang + "' differs in shape");
        }
        report.languages.push_back(lang);
        report.selected[lang].assign(rates.layers, {});
    }

    std::vector<double> pool(pooled.begin(), pooled.end());
    if (pool.empty()) {
        for (const auto & [lang, m] : probs) {
            pool.insert(pool.end(), m.values.begin(), m.values.end());
        }
    }
    if (tau.mode == ThresholdMode::Percentile) {
        report.tau_resolved = nearest_rank_percentile(std::move(pool), tau.value);
    } else {
        if (!std::isfinite(tau.value)) {
            fail(ErrorCode::InvalidArgument, "absolute tau must be finite");
        }
        report.tau_resolved = tau.value;
    }

    const std::size_t quota = fraction_floor(rho, rates.layers * rates.width);
    if (quota < 1) {
        report.warnings.push_back("rho * L * I < 1: no neurons selected");
        log_warning(report.warnings.back());
        return report;
    }

    std::vector<std::size_t> order;
    order.reserve(report.active_neurons);
    for (std::size_t i = 0; i < rates.active.size(); ++i) {
        if (rates.active[i]) {
            order.push_back(i);
        }
    }
    const std::size_t take = std::min(quota, order.size());
    // Flat index order equals (layer, neuron) order for row-major storage.
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (entropy.values[a] != entropy.values[b]) {
                              return entropy.values[a] < entropy.values[b];
                          }
                          return a < b;
                      });
    order.resize(take);
    if (take < quota) {
        report.warnings.push_back("only " + std::to_string(take) + " active neurons for a quota of " +
                                  std::to_string(quota));
    }

    for (std::size_t flat : order) {
        const std::size_t l = flat / rates.width;
        const std::size_t k = flat % rates.width;
        report.candidates.emplace_back(l, k);
        for (const auto & [lang, m] : probs) {
            if (m.values[flat] > report.tau_resolved) {
                report.selected[lang][l].push_back(static_cast<std::uint32_t>(k));
            }
        }
    }
    for (auto & [lang, per_layer] : report.selected) {
        for (auto & ks : per_layer) {
            std::sort(ks.begin(), ks.end());
        }
    }
    return report;
}

std::vector<SelectivityReport> run_selectivity(std::span<const ActivationCountTable> tables,
                                               const SelectivityOptions & options) {
    std::map<Span, std::vector<const ActivationCountTable *>> by_span;
    for (const ActivationCountTable & t : tables) {
        t.validate();
        by_span[t.span].push_back(&t);
    }

    std::vector<Span> spans = options.spans;
    if (spans.empty()) {
        for (const auto & [span, list] : by_span) {
            if (list.size() >= 2) {
                spans.push_back(span);
            }
        }
        if (spans.empty()) {
            fail(ErrorCode::InvalidArgument, "selectivity needs count tables for at least two languages in some span");
        }
    }

    std::map<Span, LanguageMatrices> probs_by_span;
    for (const auto & [span, list] : by_span) {
        LanguageMatrices probs;
        for (const ActivationCountTable * t : list) {
            if (!probs.emplace(t->language, activation_probability(*t)).second) {
                fail(ErrorCode::InvalidArgument, "two count tables for language '" + t->language + "' in span " +
                                                     span_name(span));
            }
            if (t->model_id != list.front()->model_id) {
                log_warning("count tables mix model ids '" + list.front()->model_id + "' and '" + t->model_id + "'");
            }
        }
        probs_by_span.emplace(span, std::move(probs));
    }

    std::vector<double> all_spans_pool;
    if (options.pool_across_spans) {
        for (const auto & [span, probs] : probs_by_span) {
            for (const auto & [lang, m] : probs) {
                all_spans_pool.insert(all_spans_pool.end(), m.values.begin(), m.values.end());
            }
        }
    }

    std::vector<SelectivityReport> reports;
    for (Span span : spans) {
        auto it = probs_by_span.find(span);
        if (it == probs_by_span.end() || it->second.size() < 2) {
            fail(ErrorCode::InvalidArgument,
                 std::string("span ") + span_name(span) + " needs count tables for at least two languages");
        }
        const NormalizedRates rates = cross_language_normalize(it->second);
        const LayerMatrix h = selectivity_entropy(rates);
        SelectivityReport r = select_language_neurons(h, rates, it->second, options.rho, options.tau,
                                                      options.pool_across_spans ? std::span<const double>(all_spans_pool)
                                                                                : std::span<const double>());
        r.span = span;
        r.pooled_across_spans = options.pool_across_spans;
        reports.push_back(std::move(r));
    }
    return reports;
}

LayerCountTable layer_count_report(const SelectivityReport & report) {
    LayerCountTable table;
    table.span = report.span;
    table.languages = report.languages;
    table.counts.assign(report.layers, std::vector<std::size_t>(report.languages.size(), 0));
    table.totals.assign(report.languages.size(), 0);
    for (std::size_t c = 0; c < report.languages.size(); ++c) {
        const auto counts = report.layer_counts(report.languages[c]);
        for (std::size_t l = 0; l < report.layers; ++l) {
            table.counts[l][c] = counts[l];
            table.totals[c] += counts[l];
        }
    }
    return table;
}

std::string layer_count_csv(const LayerCountTable & table) {
    std::string csv = "layer";
    for (const auto & lang : table.languages) {
        csv += "," + lang;
    }
    csv += "\n";
    for (std::size_t l = 0; l < table.counts.size(); ++l) {
        csv += std::to_string(l);
        for (std::size_t c : table.counts[l]) {
            csv += "," + std::to_string(c);
        }
        csv += "\n";
    }
    csv += "total";
    for (std::size_t t : table.totals) {
        csv += "," + std::to_string(t);
    }
    csv += "\n";
    return csv;
}

std::string layer_count_json(const LayerCountTable & table) {
    json by_language = json::object();
    json totals = json::object();
    for (std::size_t c = 0; c < table.languages.size(); ++c) {
        json column = json::array();
        for (const auto & row : table.counts) {
            column.push_back(row[c]);
        }
        by_language[table.languages[c]] = column;
        totals[table.languages[c]] = table.totals[c];
    }
    const json j = {{"span", span_name(table.span)}, {"layer_counts", by_language}, {"totals", totals}};
    return j.dump(2) + "\n";
}

std::string totals_table_csv(std::span<const SelectivityReport> before, std::span<const SelectivityReport> after) {
    auto collect = [](std::span<const SelectivityReport> reports) {
        std::map<std::string, std::map<Span, std::size_t>> cells;
        for (const auto & r : reports) {
            for (const auto & lang : r.languages) {
                cells[lang][r.span] = r.total(lang);
            }
        }
        return cells;
    };
    const auto b = collect(before);
    const auto a = collect(after);
    std::set<std::string> languages;
    for (const auto & [lang, cells] : b) languages.insert(lang);
    for (const auto & [lang, cells] : a) languages.insert(lang);

    auto cell = [](const std::map<std::string, std::map<Span, std::size_t>> & m, const std::string & lang,
                   Span span) -> std::string {
        auto it = m.find(lang);
        if (it == m.end()) return "";
        auto jt = it->second.find(span);
        return jt == it->second.end() ? "" : std::to_string(jt->second);
    };

    std::string csv = "language,src,tgt\n";
    for (const auto & lang : languages) {
        csv += lang;
        for (Span span : {Span::Src, Span::Tgt}) {
            std::string value = cell(b, lang, span);
            if (!after.empty()) {
                value += "->" + cell(a, lang, span);
            }
            csv += "," + value;
        }
        csv += "\n";
    }
    return csv;
}

std::string selectivity_report_json(std::span<const SelectivityReport> reports) {
    json list = json::array();
    for (const auto & r : reports) {
        json selected = json::object();
        json counts = json::object();
        json totals = json::object();
        for (const auto & lang : r.languages) {
            selected[lang] = r.selected.at(lang);
            counts[lang] = r.layer_counts(lang);
            totals[lang] = r.total(lang);
        }
        json candidates = json::array();
        for (const auto & [l, k] : r.candidates) {
            candidates.push_back({l, k});
        }
        list.push_back({
            {"span", span_name(r.span)},
            {"languages", r.languages},
            {"layers", r.layers},
            {"width", r.width},
            {"params",
             {{"rho", r.rho},
              {"tau_mode", threshold_mode_name(r.tau.mode)},
              {"tau_value", r.tau.value},
              {"tau_resolved", r.tau_resolved},
              {"pool_across_spans", r.pooled_across_spans}}},
            {"active_neurons", r.active_neurons},
            {"candidate_count", r.candidates.size()},
            {"candidates", candidates},
            {"selected", selected},
            {"layer_counts", counts},
            {"totals", totals},
            {"warnings", r.warnings},
        });
    }
    const json j = {{"report", "selectivity"}, {"spans", list}};
    return j.dump(2) + "\n";
}

namespace {

std::vector<ActivationCountTable> count_tables_from(const Checkpoint & container, const json & sidecar,
                                                    const std::filesystem::path & path) {
    if (!sidecar.is_object()) {
        fail(ErrorCode::MalformedHeader, "count table sidecar must be a JSON object");
    }
    for (const char * key : {"model_id", "language", "token_total", "L", "I"}) {
        if (!sidecar.contains(key)) {
            fail(ErrorCode::MalformedHeader, std::string("count table sidecar lacks '") + key + "'");
        }
    }
    const auto layers = sidecar["L"].get<std::size_t>();
    const auto width = sidecar["I"].get<std::size_t>();
    const json & totals = sidecar["token_total"];

    std::vector<ActivationCountTable> tables;
    for (const auto & [name, tensor] : container.tensors()) {
        Span span;
        if (name == "counts/src") {
            span = Span::Src;
        } else if (name == "counts/tgt") {
            span = Span::Tgt;
        } else if (name == "counts" && sidecar.contains("span") && sidecar["span"].is_string()) {
            span = parse_span(sidecar["span"].get<std::string>());
        } else {
            log_warning("ignoring unexpected tensor '" + name + "' in count table " + path.string());
            continue;
        }
        if (tensor.shape != std::vector<std::uint64_t>{layers, width}) {
            fail(ErrorCode::Incompatible, "tensor '" + name + "' has shape " + describe_shape(tensor.shape) +
                                              " but the sidecar declares [" + std::to_string(layers) + "," +
                                              std::to_string(width) + "]");
        }
        ActivationCountTable t;
        t.model_id = sidecar["model_id"].get<std::string>();
        t.language = sidecar["language"].get<std::string>();
        t.span = span;
        t.layers = layers;
        t.width = width;
        if (totals.is_object()) {
            if (!totals.contains(span_name(span))) {
                fail(ErrorCode::MalformedHeader, std::string("sidecar token_total lacks span ") + span_name(span));
            }
            t.token_total = totals[span_name(span)].get<std::uint64_t>();
        } else {
            t.token_total = totals.get<std::uint64_t>();
        }
        t.counts.resize(layers * width);
        if (tensor.dtype == DType::U32) {
            for (std::size_t i = 0; i < t.counts.size(); ++i) {
                std::uint32_t v;
                std::memcpy(&v, tensor.data.data() + i * 4, 4);
                t.counts[i] = v;
            }
        } else if (tensor.dtype == DType::I64) {
            for (std::size_t i = 0; i < t.counts.size(); ++i) {
                std::int64_t v;
                std::memcpy(&v, tensor.data.data() + i * 8, 8);
                if (v < 0) {
                    fail(ErrorCode::InvalidArgument, "negative count in '" + name + "' at flat index " +
                                                         std::to_string(i));
                }
                t.counts[i] = static_cast<std::uint64_t>(v);
            }
        } else {
            fail(ErrorCode::UnsupportedDtype, "count tensor '" + name + "' must be U32 or I64");
        }
        t.validate();
        tables.push_back(std::move(t));
    }
    if (tables.empty()) {
        fail(ErrorCode::MalformedHeader, path.string() + " holds no counts/src or counts/tgt tensor");
    }
    return tables;
}

} // namespace

std::vector<ActivationCountTable> read_count_tables(const std::filesystem::path & path) {
    const Checkpoint container = read_checkpoint(path);
    const json sidecar = parse_json_file(sidecar_path(path));
    try {
        return count_tables_from(container, sidecar, path);
    } catch (const json::exception & e) {
        fail(ErrorCode::MalformedHeader, "count table sidecar field has the wrong type: " + std::string(e.what()));
    }
}

void write_count_tables(std::span<const ActivationCountTable> tables, const std::filesystem::path & path,
                        std::string_view harness_version) {
    if (tables.empty()) {
        fail(ErrorCode::InvalidArgument, "no count tables to write");
    }
    Checkpoint container;
    json totals = json::object();
    for (const auto & t : tables) {
        t.validate();
        if (t.model_id != tables.front().model_id || t.language != tables.front().language ||
            t.layers != tables.front().layers || t.width != tables.front().width) {
            fail(ErrorCode::InvalidArgument, "count tables written together must share model, language and shape");
        }
        Tensor tensor;
        tensor.dtype = DType::I64;
        tensor.shape = {t.layers, t.width};
        tensor.data.resize(t.counts.size() * 8);
        for (std::size_t i = 0; i < t.counts.size(); ++i) {
            const auto v = static_cast<std::int64_t>(t.counts[i]);
            std::memcpy(tensor.data.data() + i * 8, &v, 8);
        }
        container.add(std::string("counts/") + span_name(t.span), std::move(tensor));
        totals[span_name(t.span)] = t.token_total;
    }
    write_checkpoint(container, path);
    json spans = json::array();
    for (const auto & t : tables) {
        spans.push_back(span_name(t.span));
    }
    const json sidecar = {
        {"model_id", tables.front().model_id},
        {"language", tables.front().language},
        {"span", spans},
        {"token_total", totals},
        {"L", tables.front().layers},
        {"I", tables.front().width},
        {"harness_version", std::string(harness_version)},
    };
    const std::string text = sidecar.dump(2) + "\n";
    write_file_atomic(sidecar_path(path), std::as_bytes(std::span(text.data(), text.size())));
}

} // namespace wsmerge
