// SPDX-License-Identifier: Apache-2.0

#include "core/alignment.hpp"

#include "core/checkpoint.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/parallel.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace wsmerge {

namespace {

using json = nlohmann::json;

constexpr double kRankTolerance = 1e-10;
constexpr double kCkaSlack = 1e-9;

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::filesystem::path sidecar_path(const std::filesystem::path & path) {
    std::filesystem::path p = path;
    p += ".json";
    return p;
}

void check_finite(const Eigen::MatrixXd & h, const char * side) {
    if (!h.allFinite()) {
        fail(ErrorCode::NonFinite, std::string("representation ") + side + " contains non-finite values");
    }
}

std::size_t parse_index(std::string_view text, std::string_view whole) {
    std::size_t value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
        fail(ErrorCode::InvalidArgument, "bad layer index '" + std::string(text) + "' in bands '" +
                                             std::string(whole) + "'");
    }
    return value;
}

json dump_identity(const RepresentationDump & d) {
    return {{"model_id", d.model_id}, {"language", d.language}, {"span", span_name(d.span)}};
}

json angles_json(const PrincipalAngles & a) {
    return {{"radians", a.radians},
            {"degrees", a.degrees()},
            {"median_radians", a.median},
            {"median_degrees", a.median_degrees()}};
}

} // namespace

void UsageVector::validate() const {
    if (rates.size() != layers * width || layers == 0 || width == 0) {
        fail(ErrorCode::InvalidArgument, "usage vector for '" + model_id + "' is not " + std::to_string(layers) +
                                             "x" + std::to_string(width));
    }
    for (double r : rates) {
        if (!(r >= 0.0 && r <= 1.0)) {
            fail(ErrorCode::InvalidArgument, "usage rate " + fmt_double(r) + " for '" + model_id +
                                                 "' lies outside [0, 1]");
        }
    }
}

UsageVector usage_from_counts(const ActivationCountTable & table) {
    UsageVector u;
    u.model_id = table.model_id;
    u.language = table.language;
    u.span = table.span;
    u.layers = table.layers;
    u.width = table.width;
    u.rates = activation_probability(table).values;
    return u;
}

double NuaResult::mean() const {
    if (per_layer.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (double v : per_layer) {
        s += v;
    }
    return s / static_cast<double>(per_layer.size());
}

NuaResult neuron_usage_alignment(const UsageVector & a, const UsageVector & b) {
    a.validate();
    b.validate();
    if (a.span != b.span) {
        fail(ErrorCode::Incompatible, std::string("usage vectors cover different spans (") + span_name(a.span) +
                                          " vs " + span_name(b.span) + ")");
    }
    if (a.layers != b.layers || a.width != b.width) {
        fail(ErrorCode::Incompatible, "usage vectors differ in shape: " + std::to_string(a.layers) + "x" +
                                          std::to_string(a.width) + " vs " + std::to_string(b.layers) + "x" +
                                          std::to_string(b.width));
    }
    NuaResult out;
    out.span = a.span;
    out.per_layer.assign(a.layers, 0.0);
    out.zero_norm.assign(a.layers, false);
    for (std::size_t l = 0; l < a.layers; ++l) {
        const double * x = a.rates.data() + l * a.width;
        const double * y = b.rates.data() + l * a.width;
        double dot = 0.0, xx = 0.0, yy = 0.0;
        for (std::size_t k = 0; k < a.width; ++k) {
            dot += x[k] * y[k];
            xx += x[k] * x[k];
            yy += y[k] * y[k];
        }
        if (xx == 0.0 || yy == 0.0) {
            out.zero_norm[l] = true;
            continue;
        }
        // xx * yy commutes exactly, so swapping a and b changes nothing.
        out.per_layer[l] = std::clamp(dot / std::sqrt(xx * yy), -1.0, 1.0);
    }
    return out;
}

Eigen::MatrixXd center_features(const Eigen::MatrixXd & h) {
    if (h.rows() < 2) {
        fail(ErrorCode::InvalidArgument, "centering needs at least 2 rows, got " + std::to_string(h.rows()));
    }
    Eigen::MatrixXd c = h;
    c.rowwise() -= h.colwise().mean();
    return c;
}

double linear_cka(const Eigen::MatrixXd & ha, const Eigen::MatrixXd & hb) {
    if (ha.rows() != hb.rows()) {
        fail(ErrorCode::Incompatible, "CKA inputs differ in row count: " + std::to_string(ha.rows()) + " vs " +
                                          std::to_string(hb.rows()));
    }
    check_finite(ha, "a");
    check_finite(hb, "b");
    const Eigen::MatrixXd a = center_features(ha);
    const Eigen::MatrixXd b = center_features(hb);
    if (a.squaredNorm() == 0.0) {
        fail(ErrorCode::ZeroVariance, "CKA input a has zero variance after centering");
    }
    if (b.squaredNorm() == 0.0) {
        fail(ErrorCode::ZeroVariance, "CKA input b has zero variance after centering");
    }

    double num = 0.0;
    double den = 0.0;
    const Eigen::Index n = a.rows();
    if (n < std::max(a.cols(), b.cols())) {
        // ||A^T B||_F^2 = <A A^T, B B^T>_F; cheaper when N is the small side.
        const Eigen::MatrixXd ka = a * a.transpose();
        const Eigen::MatrixXd kb = b * b.transpose();
        num = ka.cwiseProduct(kb).sum();
        den = ka.norm() * kb.norm();
    } else {
        num = (a.transpose() * b).squaredNorm();
        den = (a.transpose() * a).norm() * (b.transpose() * b).norm();
    }
    if (den == 0.0) {
        fail(ErrorCode::ZeroVariance, "CKA denominator underflowed to zero");
    }
    const double cka = num / den;
    if (!(cka >= 0.0 && cka <= 1.0 + kCkaSlack)) {
        fail(ErrorCode::NumericalRange, "CKA value " + fmt_double(cka) + " outside [0, 1+1e-9]");
    }
    return std::min(cka, 1.0);
}

double median_of(std::vector<double> values) {
    if (values.empty()) {
        fail(ErrorCode::InvalidArgument, "median of an empty list");
    }
    std::sort(values.begin(), values.end());
    const std::size_t m = values.size() / 2;
    if (values.size() % 2 == 1) {
        return values[m];
    }
    return (values[m - 1] + values[m]) / 2.0;
}

std::vector<double> PrincipalAngles::degrees() const {
    std::vector<double> out;
    out.reserve(radians.size());
    for (double r : radians) {
        out.push_back(r * 180.0 / std::numbers::pi);
    }
    return out;
}

double PrincipalAngles::median_degrees() const {
    return median * 180.0 / std::numbers::pi;
}

namespace {

Eigen::MatrixXd top_right_singular(const Eigen::MatrixXd & h, std::size_t r, const char * side) {
    const Eigen::MatrixXd c = center_features(h);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinV);
    const auto & s = svd.singularValues();
    const auto rr = static_cast<Eigen::Index>(r);
    if (s.size() < rr || s(0) == 0.0 || s(rr - 1) < kRankTolerance * s(0)) {
        const double ratio = s.size() >= rr && s(0) > 0.0 ? s(rr - 1) / s(0) : 0.0;
        fail(ErrorCode::RankDeficient, std::string("side ") + side + ": effective rank below r=" +
                                           std::to_string(r) + " (sigma_r / sigma_1 = " + fmt_double(ratio) + ")");
    }
    return svd.matrixV().leftCols(rr);
}

} // namespace

PrincipalAngles principal_angles(const Eigen::MatrixXd & ha, const Eigen::MatrixXd & hb, std::size_t r) {
    if (ha.rows() != hb.rows() || ha.cols() != hb.cols()) {
        fail(ErrorCode::Incompatible, "principal angles need equal shapes, got " + std::to_string(ha.rows()) +
                                          "x" + std::to_string(ha.cols()) + " and " + std::to_string(hb.rows()) +
                                          "x" + std::to_string(hb.cols()));
    }
    const auto n = static_cast<std::size_t>(ha.rows());
    const auto d = static_cast<std::size_t>(ha.cols());
    if (n < 2 || r < 1 || r > std::min(n - 1, d)) {
        fail(ErrorCode::InvalidArgument, "rank r=" + std::to_string(r) + " must lie in [1, min(N-1, d)] = [1, " +
                                             std::to_string(n < 2 ? 0 : std::min(n - 1, d)) + "]");
    }
    check_finite(ha, "a");
    check_finite(hb, "b");
    const Eigen::MatrixXd qa = top_right_singular(ha, r, "a");
    const Eigen::MatrixXd qb = top_right_singular(hb, r, "b");
    const Eigen::MatrixXd m = qa.transpose() * qb;
    const Eigen::VectorXd cosines = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
    // acos loses half the digits near 0, so small angles come from the sines:
    // singular values of the part of qb outside span(qa), ascending here.
    const Eigen::MatrixXd residual = qb - qa * m;
    Eigen::VectorXd sines = Eigen::JacobiSVD<Eigen::MatrixXd>(residual).singularValues();
    std::sort(sines.begin(), sines.end());

    PrincipalAngles out;
    out.radians.reserve(r);
    for (Eigen::Index i = 0; i < cosines.size(); ++i) {
        const double c = std::clamp(cosines(i), 0.0, 1.0);
        const double s = std::clamp(sines(i), 0.0, 1.0);
        out.radians.push_back(c > s ? std::asin(s) : std::acos(c));
    }
    std::sort(out.radians.begin(), out.radians.end());
    out.median = median_of(out.radians);
    return out;
}

LayerBands default_layer_bands() {
    return {{"early", 0, 11}, {"mid", 12, 27}, {"late", 28, 36}};
}

void validate_layer_bands(const LayerBands & bands) {
    if (bands.empty()) {
        fail(ErrorCode::InvalidArgument, "at least one layer band is required");
    }
    for (std::size_t i = 0; i < bands.size(); ++i) {
        const LayerBand & b = bands[i];
        if (b.first > b.last) {
            fail(ErrorCode::InvalidArgument, "band '" + b.name + "' has first layer after last");
        }
        if (i > 0 && b.first <= bands[i - 1].last) {
            fail(ErrorCode::InvalidArgument, "bands '" + bands[i - 1].name + "' and '" + b.name +
                                                 "' overlap or are out of order");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (bands[j].name == b.name) {
                fail(ErrorCode::InvalidArgument, "duplicate band name '" + b.name + "'");
            }
        }
    }
}

LayerBands parse_layer_bands(std::string_view text) {
    LayerBands bands;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t comma = text.find(',', pos);
        if (comma == std::string_view::npos) {
            comma = text.size();
        }
        std::string_view item = text.substr(pos, comma - pos);
        LayerBand band;
        const std::size_t colon = item.find(':');
        std::string_view range = item;
        if (colon != std::string_view::npos) {
            band.name = std::string(item.substr(0, colon));
            range = item.substr(colon + 1);
            if (band.name.empty()) {
                fail(ErrorCode::InvalidArgument, "empty band name in '" + std::string(text) + "'");
            }
        }
        const std::size_t dash = range.find('-');
        if (dash == std::string_view::npos) {
            band.first = band.last = parse_index(range, text);
        } else {
            band.first = parse_index(range.substr(0, dash), text);
            band.last = parse_index(range.substr(dash + 1), text);
        }
        if (band.name.empty()) {
            band.name = std::to_string(band.first) + "-" + std::to_string(band.last);
        }
        bands.push_back(std::move(band));
        pos = comma + 1;
    }
    validate_layer_bands(bands);
    return bands;
}

void RepresentationDump::validate() const {
    if (hidden.empty()) {
        fail(ErrorCode::InvalidArgument, "representation dump '" + model_id + "' has no layers");
    }
    for (std::size_t k = 0; k < hidden.size(); ++k) {
        const auto & h = hidden[k];
        if (static_cast<std::size_t>(h.rows()) != n || static_cast<std::size_t>(h.cols()) != d) {
            fail(ErrorCode::Incompatible, "layer " + std::to_string(k) + " of '" + model_id + "' is " +
                                              std::to_string(h.rows()) + "x" + std::to_string(h.cols()) +
                                              ", expected " + std::to_string(n) + "x" + std::to_string(d));
        }
        if (!h.allFinite()) {
            fail(ErrorCode::NonFinite, "layer " + std::to_string(k) + " of '" + model_id +
                                           "' contains non-finite values");
        }
    }
}

RepresentationDump read_representation_dump(const std::filesystem::path & path) {
    const Checkpoint container = read_checkpoint(path);
    const auto raw = read_file_bytes(sidecar_path(path));
    json side;
    try {
        side = json::parse(std::string_view(reinterpret_cast<const char *>(raw.data()), raw.size()));
    } catch (const json::exception & e) {
        fail(ErrorCode::MalformedHeader, sidecar_path(path).string() + " is not valid JSON: " + e.what());
    }
    for (const char * key : {"model_id", "language", "span", "N", "d", "layers", "dataset_fingerprint"}) {
        if (!side.is_object() || !side.contains(key)) {
            fail(ErrorCode::MalformedHeader, std::string("representation sidecar lacks '") + key + "'");
        }
    }
    RepresentationDump dump;
    std::size_t layers = 0;
    try {
        dump.model_id = side["model_id"].get<std::string>();
        dump.language = side["language"].get<std::string>();
        dump.span = parse_span(side["span"].get<std::string>());
        dump.n = side["N"].get<std::size_t>();
        dump.d = side["d"].get<std::size_t>();
        dump.dataset_fingerprint = side["dataset_fingerprint"].get<std::string>();
        layers = side["layers"].get<std::size_t>();
    } catch (const json::type_error & e) {
        fail(ErrorCode::MalformedHeader, std::string("representation sidecar field has the wrong type: ") + e.what());
    }
    for (std::size_t k = 0; k < layers; ++k) {
        const std::string name = "hidden/layer_" + std::to_string(k);
        const Tensor * t = container.find(name);
        if (t == nullptr) {
            fail(ErrorCode::MalformedHeader, path.string() + " lacks tensor '" + name + "'");
        }
        if (t->shape != std::vector<std::uint64_t>{dump.n, dump.d}) {
            fail(ErrorCode::Incompatible, "tensor '" + name + "' has shape " + describe_shape(t->shape) +
                                              ", sidecar declares [" + std::to_string(dump.n) + "," +
                                              std::to_string(dump.d) + "]");
        }
        const std::vector<float> values = decode_f32(t->data, t->dtype);
        Eigen::MatrixXd h(dump.n, dump.d);
        for (std::size_t i = 0; i < dump.n; ++i) {
            for (std::size_t j = 0; j < dump.d; ++j) {
                h(i, j) = values[i * dump.d + j];
            }
        }
        dump.hidden.push_back(std::move(h));
    }
    if (container.size() != layers) {
        log_warning(path.string() + " holds tensors beyond the " + std::to_string(layers) + " declared layers");
    }
    dump.validate();
    return dump;
}

void write_representation_dump(const RepresentationDump & dump, const std::filesystem::path & path) {
    dump.validate();
    Checkpoint container;
    std::vector<float> values(dump.n * dump.d);
    for (std::size_t k = 0; k < dump.hidden.size(); ++k) {
        const auto & h = dump.hidden[k];
        for (std::size_t i = 0; i < dump.n; ++i) {
            for (std::size_t j = 0; j < dump.d; ++j) {
                values[i * dump.d + j] = static_cast<float>(h(i, j));
            }
        }
        container.add("hidden/layer_" + std::to_string(k), make_f32_tensor({dump.n, dump.d}, values));
    }
    write_checkpoint(container, path);
    const json side = {
        {"model_id", dump.model_id},
        {"language", dump.language},
        {"span", span_name(dump.span)},
        {"N", dump.n},
        {"d", dump.d},
        {"layers", dump.hidden.size()},
        {"dataset_fingerprint", dump.dataset_fingerprint},
    };
    const std::string text = side.dump(2) + "\n";
    write_file_atomic(sidecar_path(path), std::as_bytes(std::span(text.data(), text.size())));
}

double band_mean(std::span<const double> values, const LayerBand & band) {
    if (band.first > band.last || band.last >= values.size()) {
        fail(ErrorCode::InvalidArgument, "band '" + band.name + "' (" + std::to_string(band.first) + "-" +
                                             std::to_string(band.last) + ") exceeds " +
                                             std::to_string(values.size()) + " layers");
    }
    double s = 0.0;
    for (std::size_t l = band.first; l <= band.last; ++l) {
        s += values[l];
    }
    return s / static_cast<double>(band.last - band.first + 1);
}

namespace {

void check_pair(const RepresentationDump & a, const RepresentationDump & b) {
    a.validate();
    b.validate();
    if (a.dataset_fingerprint != b.dataset_fingerprint) {
        fail(ErrorCode::FingerprintMismatch, "dataset fingerprints differ ('" + a.dataset_fingerprint + "' vs '" +
                                                 b.dataset_fingerprint + "'): the dumps were computed on different inputs");
    }
    if (a.n != b.n || a.d != b.d || a.layers() != b.layers()) {
        fail(ErrorCode::Incompatible, "dump dimensions differ: N=" + std::to_string(a.n) + ", d=" +
                                          std::to_string(a.d) + ", layers=" + std::to_string(a.layers()) +
                                          " vs N=" + std::to_string(b.n) + ", d=" + std::to_string(b.d) +
                                          ", layers=" + std::to_string(b.layers()));
    }
    if (a.span != b.span) {
        log_warning(std::string("comparing dumps from different spans (") + span_name(a.span) + " vs " +
                    span_name(b.span) + ")");
    }
}

} // namespace

CkaProfile cka_profile(const RepresentationDump & a, const RepresentationDump & b, const LayerBands & bands,
                       unsigned threads) {
    check_pair(a, b);
    if (!bands.empty()) {
        validate_layer_bands(bands);
    }
    CkaProfile out;
    out.per_layer.assign(a.layers(), 0.0);
    parallel_for(a.layers(), threads, [&](std::size_t k) {
        try {
            out.per_layer[k] = linear_cka(a.hidden[k], b.hidden[k]);
        } catch (const Error & e) {
            fail(e.code(), "layer " + std::to_string(k) + ": " + e.what());
        }
    });
    for (const LayerBand & band : bands) {
        out.bands.push_back({band, band_mean(out.per_layer, band)});
    }
    return out;
}

AnglesProfile angles_profile(const RepresentationDump & a, const RepresentationDump & b, std::size_t r,
                             unsigned threads) {
    check_pair(a, b);
    AnglesProfile out;
    out.rank = r;
    out.per_layer.resize(a.layers());
    parallel_for(a.layers(), threads, [&](std::size_t k) {
        try {
            out.per_layer[k] = principal_angles(a.hidden[k], b.hidden[k], r);
        } catch (const Error & e) {
            fail(e.code(), "layer " + std::to_string(k) + ": " + e.what());
        }
    });
    return out;
}

std::string nua_report_json(const UsageVector & a, const UsageVector & b, const NuaResult & result) {
    json warnings = json::array();
    for (std::size_t l = 0; l < result.zero_norm.size(); ++l) {
        if (result.zero_norm[l]) {
            warnings.push_back("layer " + std::to_string(l) + ": zero usage norm, NUA reported as 0");
        }
    }
    const json j = {
        {"report", "nua"},
        {"span", span_name(result.span)},
        {"a", {{"model_id", a.model_id}, {"language", a.language}}},
        {"b", {{"model_id", b.model_id}, {"language", b.language}}},
        {"per_layer", result.per_layer},
        {"zero_norm", result.zero_norm},
        {"mean", result.mean()},
        {"warnings", warnings},
    };
    return j.dump(2) + "\n";
}

std::string nua_report_csv(const NuaResult & result) {
    std::string csv = "layer,nua,zero_norm\n";
    for (std::size_t l = 0; l < result.per_layer.size(); ++l) {
        csv += std::to_string(l) + "," + fmt_double(result.per_layer[l]) + "," +
               (result.zero_norm[l] ? "1" : "0") + "\n";
    }
    return csv;
}

std::string cka_report_json(const RepresentationDump & a, const RepresentationDump & b, const CkaProfile & profile) {
    json bands = json::object();
    for (const auto & bm : profile.bands) {
        bands[bm.band.name] = {{"first", bm.band.first}, {"last", bm.band.last}, {"mean", bm.mean}};
    }
    const json j = {
        {"report", "cka"},
        {"a", dump_identity(a)},
        {"b", dump_identity(b)},
        {"dataset_fingerprint", a.dataset_fingerprint},
        {"N", a.n},
        {"d", a.d},
        {"per_layer", profile.per_layer},
        {"bands", bands},
    };
    return j.dump(2) + "\n";
}

std::string cka_report_csv(const CkaProfile & profile) {
    std::string csv = "layer,cka\n";
    for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
        csv += std::to_string(l) + "," + fmt_double(profile.per_layer[l]) + "\n";
    }
    return csv;
}

std::string angles_report_json(const RepresentationDump & a, const RepresentationDump & b,
                               const AnglesProfile & profile) {
    json layers = json::array();
    for (const auto & pa : profile.per_layer) {
        layers.push_back(angles_json(pa));
    }
    const json j = {
        {"report", "principal_angles"},
        {"a", dump_identity(a)},
        {"b", dump_identity(b)},
        {"dataset_fingerprint", a.dataset_fingerprint},
        {"rank", profile.rank},
        {"per_layer", layers},
    };
    return j.dump(2) + "\n";
}

std::string angles_report_csv(const AnglesProfile & profile) {
    std::string csv = "layer,median_radians,median_degrees";
    for (std::size_t i = 0; i < profile.rank; ++i) {
        csv += ",theta_" + std::to_string(i);
    }
    csv += "\n";
    for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
        const auto & pa = profile.per_layer[l];
        csv += std::to_string(l) + "," + fmt_double(pa.median) + "," + fmt_double(pa.median_degrees());
        for (double t : pa.radians) {
            csv += "," + fmt_double(t);
        }
        csv += "\n";
    }
    return csv;
}

} // namespace wsmerge
