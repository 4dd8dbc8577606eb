#pragma once

#include <stdexcept>
#include <string>

namespace loco {

// All library failures are typed exceptions so callers (and the CLI) can
// map each kind to a distinct exit code.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {     // dimension / extent mismatches
    using Error::Error;
};
struct ContractError : Error {  // API precondition violated
    using Error::Error;
};
struct ConfigError : Error {    // invalid configuration value
    using Error::Error;
};
struct ConflictError : Error {  // duplicate task / already-present state
    using Error::Error;
};
struct MissingAdapterError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {    // bad magic / version mismatch / truncation
    using Error::Error;
};
struct ChecksumError : Error {
    using Error::Error;
};
struct RecipeError : Error {    // synthetic-data recipe cannot be realized
    using Error::Error;
};
struct MetricError : Error {    // metric undefined on the given masks
    using Error::Error;
};
struct DegenerateProfileError : Error {
    using Error::Error;
};

}  // namespace loco
