#include "tbgdiff/errors.hpp"

namespace tbgdiff {

VersionError::VersionError(int found, int expected)
    : DataError("checkpoint format version " + std::to_string(found) +
                " is not supported (this build reads version " + std::to_string(expected) + ")"),
      found_(found),
      expected_(expected) {}

}  // namespace tbgdiff
