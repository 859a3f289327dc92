#include "vehids/error.hpp"

namespace vehids {

int exit_code_for(const Error& e) noexcept
{
    switch (e.kind()) {
    case ErrorKind::config: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numeric: return 3;
    }
    return 1;
}

} // namespace vehids
