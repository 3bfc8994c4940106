#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vflow/config.h"

namespace vflow
{
    struct AblationCell
    {
        std::string name;
        std::vector<std::pair<std::string, std::string>> settings;
    };

    struct AblationMatrix
    {
        std::string axis;
        std::vector<AblationCell> cells;
    };

    /// sampling-steps, risk-interval, consistency-weight, loss-components.
    std::vector<std::string> ablation_presets();
    AblationMatrix ablation_preset(const std::string &name);

    /// One cell per line, "name: key=value key=value ..."; '#' comments and blank lines skipped.
    AblationMatrix parse_ablation_matrix(const std::string &text, std::string axis = "custom");

    struct CellResult
    {
        std::string name;
        bool ok = false;
        double final_clean_return = 0.0;
        double std_error = 0.0;
        std::string error;
    };

    /// Trains each cell in out_dir/<cell>, recording failures and moving on, then writes
    /// out_dir/summary.csv.
    std::vector<CellResult> run_ablation(const RunConfig &base, const AblationMatrix &matrix,
                                         const std::filesystem::path &out_dir);
}
