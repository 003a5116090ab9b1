#pragma once

#include <stdexcept>
#include <string>

namespace deskseg {

// Base for every failure the library raises. Catch this to handle the whole
// family, or a subclass to handle one kind.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error { public: using Error::Error; };          // dimension mismatches
class ValueError : public Error { public: using Error::Error; };          // out-of-range parameters
class DataError : public Error { public: using Error::Error; };           // bad labels, empty datasets
class StateError : public Error { public: using Error::Error; };          // cache/mode misuse
class NumericError : public Error { public: using Error::Error; };        // non-finite values during training
class FormatError : public Error { public: using Error::Error; };         // malformed files
class ConfigError : public Error { public: using Error::Error; };         // config key problems
class MetricError : public Error { public: using Error::Error; };         // degenerate metric inputs
class GenerationError : public Error { public: using Error::Error; };     // synthetic data construction failures
class SamplingError : public Error { public: using Error::Error; };       // not enough patch centers
class CompatibilityError : public Error { public: using Error::Error; };  // parameter/spec mismatches

}  // namespace deskseg
