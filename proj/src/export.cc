#include "vflow/export.h"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "vflow/config.h"

namespace vflow
{
    FlowExport export_flow(const FlowModel &model, const Vec &observation, int state_index, int particles, int steps,
                           std::uint64_t seed, const std::filesystem::path &out_dir)
    {
        if (particles < 1) throw std::invalid_argument("export_flow: particles must be >= 1");
        std::filesystem::create_directories(out_dir);
        const Vec h = model.encode(observation).col(0);
        Rng rng(seed);
        Vec z0(particles);
        for (int k = 0; k < particles; ++k) z0[k] = rng.normal();

        FlowRecorder rec;
        const Vec z1 = solve_ivp(bind_state(model, h, particles), z0, steps, &rec);
        std::stable_sort(rec.begin(), rec.end(), [](const FlowRecord &a, const FlowRecord &b) { return a.particle < b.particle; });

        std::ofstream dump(out_dir / "flow_dump.jsonl");
        for (const FlowRecord &r : rec)
            dump << nlohmann::json{{"state", state_index}, {"particle", r.particle}, {"t", r.t}, {"z", r.z}, {"v", r.v}}.dump()
                 << "\n";

        FlowExport out;
        out.records = rec.size();
        out.quantiles = QuantileDistribution::from_unsorted(z1);
        std::ofstream q(out_dir / "quantiles.csv");
        q << "k,level,value\n";
        for (int k = 0; k < particles; ++k)
            q << k << "," << format_real(QuantileDistribution::level(k, particles)) << "," << format_real(out.quantiles[k]) << "\n";

        double lo = 1e300, hi = -1e300;
        for (const FlowRecord &r : rec) {
            lo = std::min(lo, r.z);
            hi = std::max(hi, r.z);
        }
        const double pad = 0.1 * std::max(hi - lo, 1.0);
        lo -= pad;
        hi += pad;
        constexpr int nt = 21, nz = 41;
        std::ofstream grid(out_dir / "velocity_grid.csv");
        grid << "t,z,v\n";
        Vec zs(nz);
        for (int j = 0; j < nz; ++j) zs[j] = lo + (hi - lo) * j / (nz - 1);
        const ModelField field = bind_state(model, h, nz);
        for (int i = 0; i < nt; ++i) {
            const double t = static_cast<double>(i) / (nt - 1);
            const Vec v = field.velocity(zs, t);
            for (int j = 0; j < nz; ++j) grid << format_real(t) << "," << format_real(zs[j]) << "," << format_real(v[j]) << "\n";
        }
        return out;
    }
}
