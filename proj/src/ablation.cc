#include "vflow/ablation.h"

#include <fstream>
#include <sstream>

#include "vflow/trainer.h"

namespace vflow
{
    namespace
    {
        using Settings = std::vector<std::pair<std::string, std::string>>;

        AblationCell cell(std::string name, Settings s) { return {std::move(name), std::move(s)}; }

        std::string quote_csv(const std::string &s)
        {
            if (s.find_first_of(",\"\n") == std::string::npos) return s;
            std::string out = "\"";
            for (char c : s) {
                if (c == '"') out += '"';
                out += c == '\n' ? ' ' : c;
            }
            return out + "\"";
        }
    }

    std::vector<std::string> ablation_presets()
    {
        return {"sampling-steps", "risk-interval", "consistency-weight", "loss-components"};
    }

    AblationMatrix ablation_preset(const std::string &name)
    {
        AblationMatrix m;
        m.axis = name;
        if (name == "sampling-steps") {
            for (const char *n : {"1", "5", "10", "20"}) m.cells.push_back(cell(std::string("steps-") + n, {{"inference_steps", n}}));
        } else if (name == "risk-interval") {
            m.cells.push_back(cell("risk-0", {{"lambda_risk", "0"}, {"lambda_shape", "0"}}));
            for (const char *r : {"0.05", "0.1", "0.2"})
                m.cells.push_back(cell(std::string("risk-") + r, {{"alpha", r}, {"beta", r}}));
        } else if (name == "consistency-weight") {
            for (const char *w : {"0.001", "0.005", "0.01", "0.05"})
                m.cells.push_back(cell(std::string("cons-") + w, {{"lambda_cons", w}}));
        } else if (name == "loss-components") {
            Settings s = {{"critic_mode", "flow"}, {"use_wconf", "false"}, {"lambda_reg", "0"}, {"lambda_cons", "0"},
                          {"lambda_risk", "0"}, {"lambda_shape", "0"}, {"spectral_norm", "false"}};
            m.cells.push_back(cell("ppo", {{"critic_mode", "scalar"}}));
            m.cells.push_back(cell("dcfm", s));
            s.emplace_back("lambda_risk", "0.5");
            m.cells.push_back(cell("risk", s));
            s.emplace_back("lambda_shape", "0.5");
            m.cells.push_back(cell("shape", s));
            s.emplace_back("use_wconf", "true");
            m.cells.push_back(cell("uncertainty", s));
            s.emplace_back("lambda_reg", "0.1");
            s.emplace_back("lambda_cons", "0.01");
            m.cells.push_back(cell("consistency", s));
            s.emplace_back("spectral_norm", "true");
            m.cells.push_back(cell("lipschitz", s));
        } else {
            throw std::invalid_argument("unknown ablation preset '" + name + "'");
        }
        return m;
    }

    AblationMatrix parse_ablation_matrix(const std::string &text, std::string axis)
    {
        AblationMatrix m;
        m.axis = std::move(axis);
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const auto colon = line.find(':');
            if (colon == std::string::npos)
                throw std::invalid_argument("ablation matrix line " + std::to_string(lineno) + ": expected 'name: key=value ...'");
            AblationCell c;
            std::istringstream name(line.substr(0, colon));
            name >> c.name;
            if (c.name.empty()) throw std::invalid_argument("ablation matrix line " + std::to_string(lineno) + ": empty cell name");
            std::istringstream rest(line.substr(colon + 1));
            std::string kv;
            while (rest >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos || eq == 0)
                    throw std::invalid_argument("ablation matrix line " + std::to_string(lineno) + ": bad setting '" + kv + "'");
                c.settings.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
            }
            m.cells.push_back(std::move(c));
        }
        return m;
    }

    std::vector<CellResult> run_ablation(const RunConfig &base, const AblationMatrix &matrix,
                                         const std::filesystem::path &out_dir)
    {
        std::filesystem::create_directories(out_dir);
        std::vector<CellResult> results;
        for (const AblationCell &c : matrix.cells) {
            CellResult r;
            r.name = c.name;
            try {
                RunConfig cfg = base;
                for (const auto &[k, v] : c.settings) apply_setting(cfg, k, v);
                cfg.validate();
                Trainer trainer(cfg, out_dir / c.name);
                trainer.run();
                const EvalStats stats = trainer.evaluate_policy(cfg.eval_episodes, cfg.eval_ood,
                                                                Rng::derive(cfg.seed, 0xAB1A7E).engine()());
                r.final_clean_return = stats.mean_return;
                r.std_error = stats.std_error;
                r.ok = true;
            } catch (const std::exception &e) {
                r.error = e.what();
            }
            results.push_back(std::move(r));
        }
        std::ofstream out(out_dir / "summary.csv");
        out << "axis,cell,status,final_clean_return,std_error,error\n";
        for (const CellResult &r : results)
            out << quote_csv(matrix.axis) << "," << quote_csv(r.name) << "," << (r.ok ? "ok" : "failed") << ","
                << (r.ok ? format_real(r.final_clean_return) : "") << "," << (r.ok ? format_real(r.std_error) : "") << ","
                << quote_csv(r.error) << "\n";
        return results;
    }
}
