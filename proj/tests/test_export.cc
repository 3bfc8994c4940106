#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "vflow/ablation.h"
#include "vflow/export.h"
#include "vflow/trainer.h"

using namespace vflow;
namespace fs = std::filesystem;

namespace
{
    fs::path scratch(const std::string &name)
    {
        const fs::path p = fs::temp_directory_path() / "vflow_unit" / name;
        fs::remove_all(p);
        return p;
    }

    std::vector<std::string> read_lines(const fs::path &p)
    {
        std::ifstream in(p);
        std::vector<std::string> out;
        for (std::string l; std::getline(in, l);) out.push_back(l);
        return out;
    }
}

TEST_SUITE("export")
{
    TEST_CASE("flow dump has particles × (steps + 1) records with increasing t")
    {
        RunConfig cfg;
        FlowModel model(cfg.flow_shape(5), 3);
        const fs::path dir = scratch("export");
        const FlowExport e = export_flow(model, Vec::Unit(5, 2), 2, 50, 50, 7, dir);
        CHECK(e.records == 50u * 51u);

        const auto dump = read_lines(dir / "flow_dump.jsonl");
        REQUIRE(dump.size() == 50u * 51u);
        std::map<int, std::vector<double>> times;
        std::map<int, double> last_z;
        for (const auto &l : dump) {
            const auto j = nlohmann::json::parse(l);
            CHECK(j.at("state").get<int>() == 2);
            const int k = j.at("particle").get<int>();
            times[k].push_back(j.at("t").get<double>());
            last_z[k] = j.at("z").get<double>();
            CHECK(j.contains("v"));
        }
        CHECK(times.size() == 50);
        for (const auto &[k, ts] : times) {
            REQUIRE(ts.size() == 51);
            CHECK(ts.front() == 0.0);
            CHECK(ts.back() == 1.0);
            for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] > ts[i - 1]);
        }

        const auto q = read_lines(dir / "quantiles.csv");
        REQUIRE(q.size() == 51);
        CHECK(q.front() == "k,level,value");
        CHECK(q[1].rfind("0,0.01,", 0) == 0);
        std::vector<double> terminal;
        for (const auto &[k, z] : last_z) terminal.push_back(z);
        std::sort(terminal.begin(), terminal.end());
        for (int k = 0; k < 50; ++k) CHECK(e.quantiles[k] == terminal[static_cast<std::size_t>(k)]);

        const auto grid = read_lines(dir / "velocity_grid.csv");
        CHECK(grid.front() == "t,z,v");
        CHECK(grid.size() == 1 + 21 * 41);
    }

    TEST_CASE("export is reproducible for a seed")
    {
        RunConfig cfg;
        FlowModel model(cfg.flow_shape(1), 8);
        const fs::path a = scratch("exp_a"), b = scratch("exp_b");
        export_flow(model, Vec::Ones(1), 0, 5, 4, 11, a);
        export_flow(model, Vec::Ones(1), 0, 5, 4, 11, b);
        CHECK(read_lines(a / "flow_dump.jsonl") == read_lines(b / "flow_dump.jsonl"));
        CHECK_THROWS_AS(export_flow(model, Vec::Ones(1), 0, 0, 4, 11, a), std::invalid_argument);
    }
}

TEST_SUITE("export")
{
    TEST_CASE("ablation presets mirror the table axes")
    {
        const AblationMatrix steps = ablation_preset("sampling-steps");
        REQUIRE(steps.cells.size() == 4);
        std::vector<std::string> values;
        for (const auto &c : steps.cells) values.push_back(c.settings.at(0).second);
        CHECK(values == std::vector<std::string>{"1", "5", "10", "20"});

        const AblationMatrix risk = ablation_preset("risk-interval");
        REQUIRE(risk.cells.size() == 4);
        CHECK(risk.cells[0].name == "risk-0");
        CHECK(risk.cells[3].name == "risk-0.2");

        for (const auto &name : ablation_presets()) {
            for (const auto &c : ablation_preset(name).cells) {
                RunConfig cfg;
                for (const auto &[k, v] : c.settings) apply_setting(cfg, k, v);
                CHECK_NOTHROW(cfg.validate());
            }
        }
        CHECK_THROWS_AS(ablation_preset("nope"), std::invalid_argument);
    }

    TEST_CASE("empty matrix gives an empty summary")
    {
        const fs::path dir = scratch("ablate_empty");
        const auto results = run_ablation(RunConfig{}, parse_ablation_matrix("# nothing\n\n"), dir);
        CHECK(results.empty());
        CHECK(read_lines(dir / "summary.csv") ==
              std::vector<std::string>{"axis,cell,status,final_clean_return,std_error,error"});
    }

    TEST_CASE("failing cells are recorded and the matrix continues")
    {
        const fs::path dir = scratch("ablate_mixed");
        RunConfig base = parse_config("iterations = 1\nepisodes_per_iter = 2\nK = 8\nfield_hidden = 8\nencoder_hidden = 8\n"
                                      "time_hidden = 8\nstate_dim = 4\ntime_dim = 4\ntail_states_per_batch = 2\n"
                                      "eval_episodes = 3\npolicy_hidden = 8\ncritic_hidden = 8\n");
        const AblationMatrix m = parse_ablation_matrix("bad: alpha=1.5\ngood: lambda_cons=0.05\n", "custom");
        const auto results = run_ablation(base, m, dir);
        REQUIRE(results.size() == 2);
        CHECK_FALSE(results[0].ok);
        CHECK(results[0].error.find("alpha") != std::string::npos);
        CHECK(results[1].ok);
        CHECK(fs::exists(dir / "good" / "metrics.csv"));
        const auto summary = read_lines(dir / "summary.csv");
        REQUIRE(summary.size() == 3);
        CHECK(summary[1].rfind("custom,bad,failed,", 0) == 0);
        CHECK(summary[2].rfind("custom,good,ok,", 0) == 0);

        CHECK_THROWS_AS(parse_ablation_matrix("no colon here"), std::invalid_argument);
        CHECK_THROWS_AS(parse_ablation_matrix("x: novalue"), std::invalid_argument);
    }
}
