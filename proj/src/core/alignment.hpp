// SPDX-License-Identifier: Apache-2.0
//
// Cross-model alignment metrics: neuron usage alignment (per-layer cosine of
// activation rates), linear CKA on centered representations, and principal
// angles between the dominant right-singular subspaces of two representations.

#pragma once

#include "core/activation_stats.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wsmerge {

struct UsageVector {
    std::string model_id;
    std::string language;
    Span span = Span::Src;
    std::size_t layers = 0;
    std::size_t width = 0;
    std::vector<double> rates;  // layers * width, row-major, each in [0, 1]

    void validate() const;
};

UsageVector usage_from_counts(const ActivationCountTable & table);

struct NuaResult {
    Span span = Span::Src;
    std::vector<double> per_layer;
    // true where either usage vector has zero norm; the cosine is reported as 0
    std::vector<bool> zero_norm;

    double mean() const;
};

// Bitwise symmetric in (a, b).
NuaResult neuron_usage_alignment(const UsageVector & a, const UsageVector & b);

// Subtracts each column's mean. Throws InvalidArgument for fewer than 2 rows.
Eigen::MatrixXd center_features(const Eigen::MatrixXd & h);

// Centers both inputs. Throws ZeroVariance when either side is constant, and
// NumericalRange if the ratio escapes [0, 1 + 1e-9].
double linear_cka(const Eigen::MatrixXd & ha, const Eigen::MatrixXd & hb);

struct PrincipalAngles {
    std::vector<double> radians;  // ascending
    double median = 0.0;          // radians; mean of the middle pair for even r

    std::vector<double> degrees() const;
    double median_degrees() const;
};

// Requires 1 <= r <= min(N - 1, d). Throws RankDeficient naming side "a" or
// "b" when its r-th singular value is below 1e-10 of its largest.
PrincipalAngles principal_angles(const Eigen::MatrixXd & ha, const Eigen::MatrixXd & hb, std::size_t r);

double median_of(std::vector<double> values);

struct LayerBand {
    std::string name;
    std::size_t first = 0;
    std::size_t last = 0;  // inclusive
};

using LayerBands = std::vector<LayerBand>;

// early 0-11, mid 12-27, late 28-36
LayerBands default_layer_bands();

// "0-11,12-27,28-36" or "early:0-11,mid:12-27". Unnamed bands are named after
// their range. Bands must be ascending and disjoint.
LayerBands parse_layer_bands(std::string_view text);
void validate_layer_bands(const LayerBands & bands);

struct RepresentationDump {
    std::string model_id;
    std::string language;
    Span span = Span::Src;
    std::string dataset_fingerprint;
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<Eigen::MatrixXd> hidden;  // one N x d matrix per layer

    std::size_t layers() const { return hidden.size(); }
    void validate() const;
};

// Tensors hidden/layer_{k} (F32, [N, d]) plus a `<path>.json` sidecar with
// model_id, language, span, N, d, layers, dataset_fingerprint.
RepresentationDump read_representation_dump(const std::filesystem::path & path);
void write_representation_dump(const RepresentationDump & dump, const std::filesystem::path & path);

struct BandMean {
    LayerBand band;
    double mean = 0.0;
};

struct CkaProfile {
    std::vector<double> per_layer;
    std::vector<BandMean> bands;
};

// Throws FingerprintMismatch when the dumps were computed on different inputs,
// Incompatible on N, d or layer-count mismatch and InvalidArgument when a band
// reaches past the last layer.
CkaProfile cka_profile(const RepresentationDump & a, const RepresentationDump & b, const LayerBands & bands,
                       unsigned threads = 0);

// Arithmetic mean of values[first..last] in index order.
double band_mean(std::span<const double> values, const LayerBand & band);

struct AnglesProfile {
    std::size_t rank = 0;
    std::vector<PrincipalAngles> per_layer;
};

AnglesProfile angles_profile(const RepresentationDump & a, const RepresentationDump & b, std::size_t r,
                             unsigned threads = 0);

// Reports: sorted-key JSON, newline-terminated; CSV with a header row.
std::string nua_report_json(const UsageVector & a, const UsageVector & b, const NuaResult & result);
std::string nua_report_csv(const NuaResult & result);
std::string cka_report_json(const RepresentationDump & a, const RepresentationDump & b, const CkaProfile & profile);
std::string cka_report_csv(const CkaProfile & profile);
std::string angles_report_json(const RepresentationDump & a, const RepresentationDump & b,
                               const AnglesProfile & profile);
std::string angles_report_csv(const AnglesProfile & profile);

} // namespace wsmerge
