// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include "manifest.hpp"
#include "recipe.hpp"

#include "wsmerge/wsmerge.h"

#include "json.hpp"

#include <filesystem>
#include <memory>
#include <ostream>

namespace fs = std::filesystem;

namespace wsmerge::cli {

namespace {

using json = nlohmann::json;

struct CheckpointFree {
    void operator()(wsm_checkpoint * p) const { wsm_checkpoint_free(p); }
};
struct TaskVectorFree {
    void operator()(wsm_task_vector * p) const { wsm_task_vector_free(p); }
};
struct DumpFree {
    void operator()(wsm_dump * p) const { wsm_dump_free(p); }
};

using CheckpointPtr = std::unique_ptr<wsm_checkpoint, CheckpointFree>;
using TaskVectorPtr = std::unique_ptr<wsm_task_vector, TaskVectorFree>;
using DumpPtr = std::unique_ptr<wsm_dump, DumpFree>;

void check(wsm_status s) {
    if (s != WSM_OK) {
        throw CliError(exit_code_for_status(s), wsm_status_name(s), wsm_last_error_message());
    }
}

std::string take(char * s) {
    if (s == nullptr) {
        return {};
    }
    std::string out(s);
    wsm_string_free(s);
    return out;
}

fs::path resolve_workdir(const std::string & workdir) {
    std::error_code ec;
    if (workdir.empty() || !fs::is_directory(workdir, ec)) {
        throw CliError(kExitValidation, "invalid_argument", "--workdir '" + workdir + "' is not a directory");
    }
    return fs::absolute(workdir);
}

fs::path under(const fs::path & workdir, const std::string & rel) {
    const fs::path p(rel);
    return p.is_absolute() ? p : workdir / p;
}

CheckpointPtr open_checkpoint(const fs::path & path) {
    wsm_checkpoint * raw = nullptr;
    const std::string s = path.string();
    const bool sharded = s.size() >= 11 && s.compare(s.size() - 11, 11, ".index.json") == 0;
    check(sharded ? wsm_checkpoint_read_sharded(s.c_str(), &raw) : wsm_checkpoint_read(s.c_str(), &raw));
    return CheckpointPtr(raw);
}

std::string content_hash(const wsm_checkpoint * c) {
    char * hex = nullptr;
    check(wsm_checkpoint_content_hash(c, &hex));
    return take(hex);
}

json input_record(const fs::path & workdir, const std::string & rel, const wsm_checkpoint * c) {
    json rec = file_record(workdir, rel);
    rec["content_hash"] = content_hash(c);
    return rec;
}

std::vector<const char *> c_strings(const std::vector<std::string> & v) {
    std::vector<const char *> out;
    for (const auto & s : v) {
        out.push_back(s.c_str());
    }
    return out;
}

std::uint64_t estimate_output_bytes(const wsm_checkpoint * base, const std::string & policy) {
    std::uint64_t total = 1 << 20;  // header and slack
    const std::size_t n = wsm_checkpoint_tensor_count(base);
    for (std::size_t i = 0; i < n; ++i) {
        wsm_tensor_info info{};
        check(wsm_checkpoint_tensor_info(base, i, &info));
        std::uint64_t elements = 1;
        for (std::size_t d = 0; d < info.ndim; ++d) {
            elements *= info.shape[d];
        }
        const std::string dtype = info.dtype;
        const bool is_float = dtype == "F32" || dtype == "F16" || dtype == "BF16";
        if (!is_float || policy == "source") {
            total += info.nbytes;
        } else {
            total += elements * (policy == "f32" ? 4 : 2);
        }
    }
    return total;
}

void check_disk_space(const fs::path & workdir, std::uint64_t needed) {
    std::error_code ec;
    const fs::space_info space = fs::space(workdir, ec);
    if (ec) {
        return;  // unknown filesystem; let the write itself fail if it must
    }
    if (space.available < needed) {
        throw CliError(kExitIo, "io_error", "insufficient disk space in " + workdir.string() + ": need " +
                                                std::to_string(needed) + " bytes, " +
                                                std::to_string(space.available) + " available");
    }
}

json resolved_params(const Recipe & r) {
    json j = {{"method", r.method}, {"dtype_policy", r.dtype_policy}, {"exclude_patterns", r.exclude_patterns}};
    const std::vector<double> alphas = r.alphas.empty() ? std::vector<double>(r.models.size(), 1.0) : r.alphas;
    if (r.method == "task_arithmetic") {
        j["alphas"] = alphas;
    } else if (r.method == "ties") {
        j["k"] = r.k;
        j["lambda"] = r.lambda;
    } else if (r.method == "dare") {
        j["p"] = r.p;
        j["seed"] = r.seed;
        j["alphas"] = alphas;
    } else {
        j["topk"] = r.topk;
        j["pivot"] = "base";
    }
    return j;
}

CheckpointPtr run_merge(const wsm_checkpoint * base, const std::vector<TaskVectorPtr> & deltas, const Recipe & r,
                        unsigned threads) {
    wsm_merge_params params;
    wsm_merge_params_init(&params);
    params.method = r.method.c_str();
    params.k = r.k;
    params.p = r.p;
    params.lambda = r.lambda;
    params.topk = r.topk;
    params.seed = r.seed;
    params.alphas = r.alphas.empty() ? nullptr : r.alphas.data();
    params.alpha_count = r.alphas.size();
    const auto patterns = c_strings(r.exclude_patterns);
    params.exclude_patterns = patterns.data();
    params.exclude_count = patterns.size();
    params.dtype_policy = r.dtype_policy.c_str();
    params.threads = threads;
    std::vector<const wsm_task_vector *> raw;
    for (const auto & d : deltas) {
        raw.push_back(d.get());
    }
    wsm_checkpoint * out = nullptr;
    check(wsm_merge(base, raw.data(), raw.size(), &params, &out));
    return CheckpointPtr(out);
}

void write_checkpoint_file(const wsm_checkpoint * c, const fs::path & path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    check(wsm_checkpoint_write(c, path.string().c_str()));
}

std::string path_with_suffix(const std::string & rel, const char * suffix) {
    return rel + suffix;
}

json base_manifest(const char * command) {
    return {{"command", command}, {"tool_version", wsm_version()}};
}

void write_report_files(const fs::path & workdir, const std::string & prefix,
                        const std::vector<std::pair<std::string, std::string>> & files, json manifest,
                        const WallClock & clock, std::ostream & out) {
    json outputs = json::array();
    for (const auto & [suffix, text] : files) {
        const std::string rel = prefix + suffix;
        write_text_file(under(workdir, rel), text);
        outputs.push_back(file_record(workdir, relative_to(workdir, under(workdir, rel))));
        out << "wrote " << rel << "\n";
    }
    manifest["outputs"] = outputs;
    manifest[kWallClockKey] = clock.record();
    const std::string mrel = prefix + ".manifest.json";
    write_json_file(under(workdir, mrel), manifest);
    out << "wrote " << mrel << "\n";
}

json table_inputs(const fs::path & workdir, const std::vector<std::string> & paths) {
    json arr = json::array();
    for (const auto & p : paths) {
        json rec = file_record(workdir, p);
        rec["sidecar"] = file_record(workdir, p + ".json");
        arr.push_back(rec);
    }
    return arr;
}

std::vector<std::string> full_paths(const fs::path & workdir, const std::vector<std::string> & rel) {
    std::vector<std::string> out;
    for (const auto & r : rel) {
        out.push_back(under(workdir, r).string());
    }
    return out;
}

DumpPtr open_dump(const fs::path & path) {
    wsm_dump * raw = nullptr;
    check(wsm_dump_read(path.string().c_str(), &raw));
    return DumpPtr(raw);
}

} // namespace

int exit_code_for_status(int status) {
    switch (status) {
        case WSM_OK:
            return kExitOk;
        case WSM_ERR_INVALID_ARGUMENT:
        case WSM_ERR_INCOMPATIBLE:
        case WSM_ERR_BASE_MISMATCH:
        case WSM_ERR_FINGERPRINT:
            return kExitValidation;
        case WSM_ERR_NON_FINITE:
        case WSM_ERR_ZERO_VARIANCE:
        case WSM_ERR_RANK_DEFICIENT:
        case WSM_ERR_NUMERICAL_RANGE:
            return kExitNumerical;
        case WSM_ERR_IO:
        case WSM_ERR_TRUNCATED:
        case WSM_ERR_MALFORMED_HEADER:
        case WSM_ERR_OVERLAPPING_OFFSETS:
        case WSM_ERR_OFFSET_OUT_OF_RANGE:
        case WSM_ERR_UNSUPPORTED_DTYPE:
        case WSM_ERR_DUPLICATE_TENSOR:
            return kExitIo;
        default:
            return kExitInternal;
    }
}

int cmd_merge(const MergeArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    Recipe recipe;
    try {
        recipe = load_recipe(under(workdir, args.recipe).string());
    } catch (const RecipeError & e) {
        throw CliError(kExitValidation, "schema_error", e.what());
    }
    if (args.sweep) {
        recipe.sweep = true;
    }

    const CheckpointPtr base = open_checkpoint(under(workdir, recipe.base));
    json inputs = {{"base", input_record(workdir, recipe.base, base.get())}, {"models", json::array()}};
    std::vector<TaskVectorPtr> deltas;
    const auto patterns = c_strings(recipe.exclude_patterns);
    for (const auto & m : recipe.models) {
        const CheckpointPtr model = open_checkpoint(under(workdir, m));
        inputs["models"].push_back(input_record(workdir, m, model.get()));
        wsm_delta_options opt;
        wsm_delta_options_init(&opt);
        opt.exclude_patterns = patterns.data();
        opt.exclude_count = patterns.size();
        wsm_task_vector * tv = nullptr;
        check(wsm_task_vector_compute(model.get(), base.get(), &opt, &tv));
        deltas.emplace_back(tv);
    }

    const std::uint64_t per_output = estimate_output_bytes(base.get(), recipe.dtype_policy);

    if (!recipe.sweep) {
        check_disk_space(workdir, per_output);
        const CheckpointPtr merged = run_merge(base.get(), deltas, recipe, args.threads);
        write_checkpoint_file(merged.get(), under(workdir, recipe.output));
        json manifest = base_manifest("merge");
        manifest["recipe"] = recipe.echo;
        manifest["inputs"] = inputs;
        manifest["resolved"] = resolved_params(recipe);
        manifest["outputs"] = json::array({file_record(workdir, recipe.output)});
        manifest[kWallClockKey] = clock.record();
        const std::string mrel = path_with_suffix(recipe.output, ".manifest.json");
        write_json_file(under(workdir, mrel), manifest);
        out << "wrote " << recipe.output << "\n" << "wrote " << mrel << "\n";
        return kExitOk;
    }

    const std::vector<SweepCell> cells = expand_sweep(recipe);
    check_disk_space(workdir, per_output * cells.size());
    const fs::path output_rel(recipe.output);
    const fs::path root_rel = output_rel.parent_path() / output_rel.stem();
    const std::string file_name = output_rel.filename().string();
    json index_cells = json::array();
    for (const SweepCell & cell : cells) {
        char dir[32];
        std::snprintf(dir, sizeof(dir), "cell_%03zu_", cell.index);
        const fs::path cell_rel = root_rel / (dir + cell.label);
        const std::string out_rel = (cell_rel / file_name).generic_string();
        const std::string manifest_rel = (cell_rel / "manifest.json").generic_string();

        const CheckpointPtr merged = run_merge(base.get(), deltas, cell.recipe, args.threads);
        write_checkpoint_file(merged.get(), under(workdir, out_rel));

        json resolved = resolved_params(cell.recipe);
        resolved["sweep_cell"] = {{"index", cell.index}, {"label", cell.label}};
        json manifest = base_manifest("merge");
        manifest["recipe"] = recipe.echo;
        manifest["inputs"] = inputs;
        manifest["resolved"] = resolved;
        const json output = file_record(workdir, out_rel);
        manifest["outputs"] = json::array({output});
        manifest[kWallClockKey] = clock.record();
        write_json_file(under(workdir, manifest_rel), manifest);
        index_cells.push_back({{"index", cell.index},
                               {"label", cell.label},
                               {"dir", cell_rel.generic_string()},
                               {"output", output},
                               {"manifest", manifest_rel},
                               {"resolved", resolved}});
        out << "wrote " << out_rel << "\n";
    }
    json axes = json::array();
    for (const auto & ax : recipe.sweep_axes.empty() ? default_sweep(recipe.method) : recipe.sweep_axes) {
        axes.push_back({{"name", ax.name}, {"values", ax.values}});
    }
    json index = base_manifest("merge");
    index["recipe"] = recipe.echo;
    index["inputs"] = inputs;
    index["axes"] = axes;
    index["cell_count"] = cells.size();
    index["cells"] = index_cells;
    index[kWallClockKey] = clock.record();
    const std::string index_rel = (root_rel / "sweep_index.json").generic_string();
    write_json_file(under(workdir, index_rel), index);
    out << "wrote " << index_rel << " (" << cells.size() << " cells)\n";
    return kExitOk;
}

int cmd_delta(const DeltaArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    const CheckpointPtr base = open_checkpoint(under(workdir, args.base));
    const CheckpointPtr model = open_checkpoint(under(workdir, args.model));
    const auto patterns = c_strings(args.exclude);
    wsm_delta_options opt;
    wsm_delta_options_init(&opt);
    opt.strict = args.lenient ? 0 : 1;
    opt.exclude_patterns = patterns.data();
    opt.exclude_count = patterns.size();
    wsm_task_vector * raw = nullptr;
    check(wsm_task_vector_compute(model.get(), base.get(), &opt, &raw));
    const TaskVectorPtr tv(raw);
    const fs::path out_path = under(workdir, args.out);
    if (out_path.has_parent_path()) {
        fs::create_directories(out_path.parent_path());
    }
    check(wsm_task_vector_write(tv.get(), out_path.string().c_str()));

    json manifest = base_manifest("delta");
    manifest["inputs"] = {{"base", input_record(workdir, args.base, base.get())},
                          {"model", input_record(workdir, args.model, model.get())}};
    manifest["resolved"] = {{"strict", !args.lenient}, {"exclude_patterns", args.exclude}};
    manifest["outputs"] = json::array({file_record(workdir, args.out), file_record(workdir, args.out + ".json")});
    manifest[kWallClockKey] = clock.record();
    write_json_file(under(workdir, args.out + ".manifest.json"), manifest);
    out << "wrote " << args.out << " (" << wsm_task_vector_tensor_count(tv.get()) << " tensors)\n";
    return kExitOk;
}

int cmd_inspect(const InspectArgs & args, std::ostream & out) {
    const fs::path workdir = resolve_workdir(args.workdir);
    const CheckpointPtr ckpt = open_checkpoint(under(workdir, args.path));
    char * raw = nullptr;
    check(wsm_checkpoint_summary_json(ckpt.get(), &raw));
    const std::string text = take(raw);
    if (args.json) {
        out << text;
        return kExitOk;
    }
    const json s = json::parse(text);
    out << args.path << "\n";
    out << s["tensor_count"].get<std::size_t>() << " tensors\n";
    out << "total parameters: " << s["total_parameters"].get<std::uint64_t>() << "\n";
    out << "dtypes:";
    for (const auto & [dtype, count] : s["dtype_histogram"].items()) {
        out << " " << dtype << "=" << count.get<std::size_t>();
    }
    out << "\nheader: valid\n";
    for (const auto & t : s["tensors"]) {
        out << "  " << t["name"].get<std::string>() << "  " << t["dtype"].get<std::string>() << "  [";
        bool first = true;
        for (const auto & d : t["shape"]) {
            out << (first ? "" : ",") << d.get<std::uint64_t>();
            first = false;
        }
        out << "]\n";
    }
    if (!s["metadata"].empty()) {
        out << "metadata keys:";
        for (const auto & [k, v] : s["metadata"].items()) {
            out << " " << k;
        }
        out << "\n";
    }
    return kExitOk;
}

int cmd_diag_selectivity(const SelectivityArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    if (args.tables.empty()) {
        throw CliError(kExitValidation, "usage_error", "diag selectivity needs at least one --tables file");
    }
    wsm_selectivity_params params;
    wsm_selectivity_params_init(&params);
    params.rho = args.rho;
    params.tau_absolute = args.tau_absolute ? 1 : 0;
    params.tau = args.tau_absolute ? *args.tau_absolute : args.tau_percentile;
    params.pool_across_spans = args.pool_spans ? 1 : 0;
    params.span = args.span ? args.span->c_str() : nullptr;

    const auto paths = full_paths(workdir, args.tables);
    const auto cpaths = c_strings(paths);
    char * report = nullptr;
    char * layers = nullptr;
    char * totals = nullptr;
    check(wsm_selectivity_report(cpaths.data(), cpaths.size(), &params, &report, &layers, &totals));
    std::vector<std::pair<std::string, std::string>> files = {
        {".json", take(report)}, {".layers.csv", take(layers)}, {".totals.csv", take(totals)}};
    if (!args.compare_tables.empty()) {
        const auto after = full_paths(workdir, args.compare_tables);
        const auto cafter = c_strings(after);
        char * cmp = nullptr;
        check(wsm_selectivity_compare_csv(cpaths.data(), cpaths.size(), cafter.data(), cafter.size(), &params, &cmp));
        files.emplace_back(".compare.csv", take(cmp));
    }

    json manifest = base_manifest("diag selectivity");
    manifest["inputs"] = {{"tables", table_inputs(workdir, args.tables)}};
    if (!args.compare_tables.empty()) {
        manifest["inputs"]["compare_tables"] = table_inputs(workdir, args.compare_tables);
    }
    json resolved = {{"rho", args.rho}, {"pool_across_spans", args.pool_spans}};
    if (args.tau_absolute) {
        resolved["tau_mode"] = "absolute";
        resolved["tau"] = *args.tau_absolute;
    } else {
        resolved["tau_mode"] = "percentile";
        resolved["tau"] = args.tau_percentile;
    }
    resolved["span"] = args.span ? json(*args.span) : json(nullptr);
    manifest["resolved"] = resolved;
    write_report_files(workdir, args.out, files, manifest, clock, out);
    return kExitOk;
}

int cmd_diag_nua(const PairArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    char * report = nullptr;
    char * csv = nullptr;
    check(wsm_nua_report(under(workdir, args.a).string().c_str(), under(workdir, args.b).string().c_str(),
                         args.span ? args.span->c_str() : nullptr, &report, &csv));
    json manifest = base_manifest("diag nua");
    manifest["inputs"] = {{"a", table_inputs(workdir, {args.a})[0]}, {"b", table_inputs(workdir, {args.b})[0]}};
    manifest["resolved"] = {{"span", args.span ? json(*args.span) : json(nullptr)}};
    write_report_files(workdir, args.out, {{".json", take(report)}, {".csv", take(csv)}}, manifest, clock, out);
    return kExitOk;
}

int cmd_diag_cka(const PairArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    const DumpPtr a = open_dump(under(workdir, args.a));
    const DumpPtr b = open_dump(under(workdir, args.b));
    char * report = nullptr;
    char * csv = nullptr;
    check(wsm_cka_report(a.get(), b.get(), args.bands ? args.bands->c_str() : nullptr, args.threads, &report, &csv));
    json manifest = base_manifest("diag cka");
    manifest["inputs"] = {{"a", table_inputs(workdir, {args.a})[0]}, {"b", table_inputs(workdir, {args.b})[0]}};
    manifest["resolved"] = {{"bands", args.bands ? json(*args.bands) : json("default")}};
    write_report_files(workdir, args.out, {{".json", take(report)}, {".csv", take(csv)}}, manifest, clock, out);
    return kExitOk;
}

int cmd_diag_angles(const PairArgs & args, std::ostream & out) {
    const WallClock clock;
    const fs::path workdir = resolve_workdir(args.workdir);
    const DumpPtr a = open_dump(under(workdir, args.a));
    const DumpPtr b = open_dump(under(workdir, args.b));
    char * report = nullptr;
    char * csv = nullptr;
    check(wsm_angles_report(a.get(), b.get(), args.rank, args.threads, &report, &csv));
    json manifest = base_manifest("diag angles");
    manifest["inputs"] = {{"a", table_inputs(workdir, {args.a})[0]}, {"b", table_inputs(workdir, {args.b})[0]}};
    manifest["resolved"] = {{"rank", args.rank}};
    write_report_files(workdir, args.out, {{".json", take(report)}, {".csv", take(csv)}}, manifest, clock, out);
    return kExitOk;
}

} // namespace wsmerge::cli
