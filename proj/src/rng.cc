#include "vflow/rng.h"

#include <sstream>
#include <stdexcept>

namespace vflow
{
    std::string Rng::state() const
    {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void Rng::set_state(const std::string &text)
    {
        std::istringstream is(text);
        is >> engine_;
        if (!is) throw std::runtime_error("malformed rng state");
    }

    Rng Rng::derive(std::uint64_t seed, std::uint64_t tag)
    {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32), 0x5eedu};
        Rng r;
        r.engine_.seed(seq);
        return r;
    }
}
