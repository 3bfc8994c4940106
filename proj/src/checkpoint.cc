#include "vflow/checkpoint.h"

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vflow
{
    static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

    const std::string &Checkpoint::meta_value(const std::string &key) const
    {
        for (const auto &[k, v] : meta)
            if (k == key) return v;
        throw std::runtime_error("checkpoint: missing meta entry '" + key + "'");
    }

    const Vec &Checkpoint::array(const std::string &name) const
    {
        for (const auto &[n, a] : arrays)
            if (n == name) return a;
        throw std::runtime_error("checkpoint: missing array '" + name + "'");
    }

    void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt)
    {
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
            out << "VFLOWCKPT " << Checkpoint::version << "\n";
            for (const auto &[k, v] : ckpt.meta) {
                if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
                    throw std::invalid_argument("checkpoint: meta entries must be single-line");
                out << "meta " << k << " " << v << "\n";
            }
            std::size_t lines = 0;
            for (char c : ckpt.config_text) lines += c == '\n';
            if (!ckpt.config_text.empty() && ckpt.config_text.back() != '\n') ++lines;
            out << "config " << lines << "\n" << ckpt.config_text;
            if (!ckpt.config_text.empty() && ckpt.config_text.back() != '\n') out << "\n";
            for (const auto &[n, a] : ckpt.arrays) out << "array " << n << " " << a.size() << "\n";
            out << "data\n";
            for (const auto &[n, a] : ckpt.arrays)
                out.write(reinterpret_cast<const char *>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
            if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    Checkpoint read_checkpoint(const std::filesystem::path &path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
        std::string line;
        std::getline(in, line);
        if (line != "VFLOWCKPT " + std::to_string(Checkpoint::version))
            throw std::runtime_error("checkpoint: unsupported header '" + line + "'");
        Checkpoint ckpt;
        std::vector<std::pair<std::string, Eigen::Index>> table;
        while (std::getline(in, line)) {
            if (line == "data") break;
            std::istringstream ls(line);
            std::string tag;
            ls >> tag;
            if (tag == "meta") {
                std::string key;
                ls >> key;
                std::string value;
                std::getline(ls, value);
                if (!value.empty() && value.front() == ' ') value.erase(0, 1);
                ckpt.meta.emplace_back(key, value);
            } else if (tag == "config") {
                std::size_t n = 0;
                ls >> n;
                for (std::size_t i = 0; i < n && std::getline(in, line); ++i) ckpt.config_text += line + "\n";
            } else if (tag == "array") {
                std::string name;
                Eigen::Index n = -1;
                ls >> name >> n;
                if (!ls || n < 0) throw std::runtime_error("checkpoint: bad array entry '" + line + "'");
                table.emplace_back(name, n);
            } else {
                throw std::runtime_error("checkpoint: unexpected manifest line '" + line + "'");
            }
        }
        if (line != "data") throw std::runtime_error("checkpoint: truncated manifest");
        for (const auto &[name, n] : table) {
            Vec a(n);
            in.read(reinterpret_cast<char *>(a.data()), static_cast<std::streamsize>(n * sizeof(double)));
            if (!in) throw std::runtime_error("checkpoint: truncated data for array '" + name + "'");
            ckpt.arrays.emplace_back(name, std::move(a));
        }
        return ckpt;
    }
}
