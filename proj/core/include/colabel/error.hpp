#pragma once

#include <stdexcept>
#include <string>

namespace colabel {

// Base of every error raised by the library. Subclasses name the failure
// category; the CLI maps some of them onto distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error { public: using Error::Error; };
class TruncationError : public Error { public: using Error::Error; };
class DimensionError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };
class SpecError : public Error { public: using Error::Error; };
class PairingError : public Error { public: using Error::Error; };
class UndefinedMetricError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class PrerequisiteError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };

} // namespace colabel
