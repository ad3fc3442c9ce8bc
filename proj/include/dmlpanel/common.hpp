#pragma once

#include <stdexcept>
#include <string>

namespace dmlpanel {

// Error categories, mapped to CLI exit codes (see tools/dmlpanel.cpp).
enum class ErrKind {
    usage,    // bad arguments / configuration
    io,       // file system failures
    data,     // dataset validation failures
    compute,  // numerical failures (divergence, degeneracy, rank)
};

class Error : public std::runtime_error {
  public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

    static Error usage(const std::string& msg) { return {ErrKind::usage, msg}; }
    static Error io(const std::string& msg) { return {ErrKind::io, msg}; }
    static Error data(const std::string& msg) { return {ErrKind::data, msg}; }
    static Error compute(const std::string& msg) { return {ErrKind::compute, msg}; }

  private:
    ErrKind kind_;
};

}  // namespace dmlpanel
