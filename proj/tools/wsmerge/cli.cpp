// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include "wsmerge/wsmerge.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <ostream>

namespace wsmerge::cli {

namespace {

void emit_error(std::ostream & err, int exit_code, const std::string & status, const std::string & message) {
    const nlohmann::json j = {
        {"error", {{"exit_code", exit_code}, {"status", status}, {"message", message}}},
    };
    err << j.dump() << "\n";
}

void log_to_stream(const char * message, void * user) {
    *static_cast<std::ostream *>(user) << "warning: " << message << "\n";
}

void add_workdir(CLI::App * cmd, std::string & workdir, bool required) {
    auto * opt = cmd->add_option("--workdir", workdir, "Directory all other paths are relative to");
    if (required) {
        opt->required();
    }
}

} // namespace

int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    CLI::App app{"Weight-space merging and multilingual representation diagnostics", "wsmerge"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(wsm_version()));

    MergeArgs merge;
    auto * merge_cmd = app.add_subcommand("merge", "Merge fine-tuned checkpoints as described by a recipe");
    add_workdir(merge_cmd, merge.workdir, true);
    merge_cmd->add_option("--recipe", merge.recipe, "Recipe JSON file")->required();
    merge_cmd->add_flag("--sweep", merge.sweep, "Expand the method's default hyperparameter grid");
    merge_cmd->add_option("--threads", merge.threads, "Worker threads (0: WSMERGE_THREADS or all cores)");

    DeltaArgs delta;
    auto * delta_cmd = app.add_subcommand("delta", "Compute a task vector (fine-tuned minus base)");
    add_workdir(delta_cmd, delta.workdir, true);
    delta_cmd->add_option("--base", delta.base)->required();
    delta_cmd->add_option("--model", delta.model)->required();
    delta_cmd->add_option("--out", delta.out)->required();
    delta_cmd->add_option("--exclude", delta.exclude, "Tensor name pattern to leave at base (repeatable)");
    delta_cmd->add_flag("--lenient", delta.lenient, "Skip mismatched tensors instead of failing");

    InspectArgs inspect;
    auto * inspect_cmd = app.add_subcommand("inspect", "Summarise a checkpoint file");
    add_workdir(inspect_cmd, inspect.workdir, false);
    inspect_cmd->add_option("path", inspect.path)->required();
    inspect_cmd->add_flag("--json", inspect.json, "Print the summary as JSON");

    auto * diag = app.add_subcommand("diag", "Representation and neuron diagnostics");
    diag->require_subcommand(1);

    SelectivityArgs sel;
    auto * sel_cmd = diag->add_subcommand("selectivity", "Language-selective neurons from count tables");
    add_workdir(sel_cmd, sel.workdir, true);
    sel_cmd->add_option("--tables", sel.tables, "Count table files, one or more per language")->required();
    sel_cmd->add_option("--compare-tables", sel.compare_tables, "Second set of tables for before->after totals");
    sel_cmd->add_option("--span", sel.span)->check(CLI::IsMember({"src", "tgt"}));
    sel_cmd->add_option("--rho", sel.rho, "Fraction of neurons kept as low-entropy candidates")
        ->capture_default_str();
    auto * tau_pct = sel_cmd->add_option("--tau-percentile", sel.tau_percentile, "Percentile level for tau")
                         ->capture_default_str();
    auto * tau_abs = sel_cmd->add_option("--tau-absolute", sel.tau_absolute, "Absolute activation-rate threshold");
    tau_pct->excludes(tau_abs);
    sel_cmd->add_flag("--pool-spans", sel.pool_spans, "Take the tau percentile over both spans together");
    sel_cmd->add_option("--out", sel.out, "Output prefix")->capture_default_str();

    PairArgs nua;
    nua.out = "nua";
    auto * nua_cmd = diag->add_subcommand("nua", "Neuron usage alignment between two models");
    add_workdir(nua_cmd, nua.workdir, true);
    nua_cmd->add_option("--a", nua.a, "Count table of the first model")->required();
    nua_cmd->add_option("--b", nua.b, "Count table of the second model")->required();
    nua_cmd->add_option("--span", nua.span)->check(CLI::IsMember({"src", "tgt"}));
    nua_cmd->add_option("--out", nua.out)->capture_default_str();

    PairArgs cka;
    cka.out = "cka";
    auto * cka_cmd = diag->add_subcommand("cka", "Layer-wise linear CKA between two representation dumps");
    add_workdir(cka_cmd, cka.workdir, true);
    cka_cmd->add_option("--a", cka.a)->required();
    cka_cmd->add_option("--b", cka.b)->required();
    cka_cmd->add_option("--bands", cka.bands, "Layer bands, e.g. 0-11,12-27,28-36");
    cka_cmd->add_option("--threads", cka.threads);
    cka_cmd->add_option("--out", cka.out)->capture_default_str();

    PairArgs angles;
    angles.out = "angles";
    auto * angles_cmd = diag->add_subcommand("angles", "Principal angles between representation subspaces");
    add_workdir(angles_cmd, angles.workdir, true);
    angles_cmd->add_option("--a", angles.a)->required();
    angles_cmd->add_option("--b", angles.b)->required();
    angles_cmd->add_option("--rank", angles.rank, "Subspace dimension r")->required();
    angles_cmd->add_option("--threads", angles.threads);
    angles_cmd->add_option("--out", angles.out)->capture_default_str();

    std::vector<std::string> argv_storage = args;
    argv_storage.insert(argv_storage.begin(), "wsmerge");
    std::vector<char *> argv;
    for (auto & a : argv_storage) {
        argv.push_back(a.data());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion &) {
        out << wsm_version() << "\n";
        return kExitOk;
    } catch (const CLI::ParseError & e) {
        emit_error(err, kExitValidation, "usage_error", e.what());
        return kExitValidation;
    }

    wsm_set_log_callback(log_to_stream, &err);
    int code = kExitOk;
    try {
        if (*merge_cmd) {
            code = cmd_merge(merge, out);
        } else if (*delta_cmd) {
            code = cmd_delta(delta, out);
        } else if (*inspect_cmd) {
            code = cmd_inspect(inspect, out);
        } else if (*sel_cmd) {
            code = cmd_diag_selectivity(sel, out);
        } else if (*nua_cmd) {
            code = cmd_diag_nua(nua, out);
        } else if (*cka_cmd) {
            code = cmd_diag_cka(cka, out);
        } else if (*angles_cmd) {
            code = cmd_diag_angles(angles, out);
        }
    } catch (const CliError & e) {
        emit_error(err, e.exit_code(), e.status(), e.what());
        code = e.exit_code();
    } catch (const std::filesystem::filesystem_error & e) {
        emit_error(err, kExitIo, "io_error", e.what());
        code = kExitIo;
    } catch (const std::ios_base::failure & e) {
        emit_error(err, kExitIo, "io_error", e.what());
        code = kExitIo;
    } catch (const std::exception & e) {
        emit_error(err, kExitInternal, "internal_error", e.what());
        code = kExitInternal;
    }
    wsm_set_log_callback(nullptr, nullptr);
    return code;
}

} // namespace wsmerge::cli
