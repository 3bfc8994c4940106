#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vflow/net.h"

namespace vflow
{
    /// Versioned container: a text manifest (meta lines, config snapshot, array table) followed
    /// by the arrays as raw little-endian 64-bit floats.
    struct Checkpoint
    {
        static constexpr int version = 1;

        std::vector<std::pair<std::string, std::string>> meta;
        std::string config_text;
        std::vector<std::pair<std::string, Vec>> arrays;

        const std::string &meta_value(const std::string &key) const;
        const Vec &array(const std::string &name) const;
    };

    void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
    Checkpoint read_checkpoint(const std::filesystem::path &path);
}
