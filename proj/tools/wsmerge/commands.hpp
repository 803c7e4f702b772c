// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsmerge::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitValidation = 2,
    kExitNumerical = 3,
    kExitIo = 4,
};

class CliError : public std::runtime_error {
public:
    CliError(int exit_code, std::string status, const std::string & message)
        : std::runtime_error(message), exit_code_(exit_code), status_(std::move(status)) {}

    int exit_code() const { return exit_code_; }
    const std::string & status() const { return status_; }

private:
    int exit_code_;
    std::string status_;
};

// Exit class for a wsm_status value.
int exit_code_for_status(int status);

struct MergeArgs {
    std::string workdir;
    std::string recipe;
    bool sweep = false;
    unsigned threads = 0;
};

struct DeltaArgs {
    std::string workdir;
    std::string base;
    std::string model;
    std::string out;
    std::vector<std::string> exclude;
    bool lenient = false;
};

struct InspectArgs {
    std::string workdir = ".";
    std::string path;
    bool json = false;
};

struct SelectivityArgs {
    std::string workdir;
    std::vector<std::string> tables;
    std::vector<std::string> compare_tables;
    std::optional<std::string> span;
    double rho = 0.1;
    double tau_percentile = 0.8;
    std::optional<double> tau_absolute;
    bool pool_spans = false;
    std::string out = "selectivity";
};

struct PairArgs {
    std::string workdir;
    std::string a;
    std::string b;
    std::string out;
    std::optional<std::string> span;   // nua
    std::optional<std::string> bands;  // cka
    std::size_t rank = 0;              // angles
    unsigned threads = 0;
};

int cmd_merge(const MergeArgs & args, std::ostream & out);
int cmd_delta(const DeltaArgs & args, std::ostream & out);
int cmd_inspect(const InspectArgs & args, std::ostream & out);
int cmd_diag_selectivity(const SelectivityArgs & args, std::ostream & out);
int cmd_diag_nua(const PairArgs & args, std::ostream & out);
int cmd_diag_cka(const PairArgs & args, std::ostream & out);
int cmd_diag_angles(const PairArgs & args, std::ostream & out);

// Parses argv and dispatches. Errors are reported on `err` as one line of
// JSON: {"error": {"exit_code", "message", "status"}}.
int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err);

} // namespace wsmerge::cli
