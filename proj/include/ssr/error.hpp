#pragma once

#include <stdexcept>
#include <string>

namespace ssr {

// Error kinds map onto CLI exit codes: validation/config/input errors
// exit 2, experiment gate failures exit 3.
enum class ErrorKind {
  validation,
  config,
  input,
  size,
  provenance,
  io,
  divergence,
  gate,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string& m) { return Error(ErrorKind::validation, m); }
inline Error config_error(const std::string& m) { return Error(ErrorKind::config, m); }
inline Error input_error(const std::string& m) { return Error(ErrorKind::input, m); }
inline Error size_error(const std::string& m) { return Error(ErrorKind::size, m); }
inline Error provenance_error(const std::string& m) { return Error(ErrorKind::provenance, m); }
inline Error io_error(const std::string& m) { return Error(ErrorKind::io, m); }
inline Error divergence_error(const std::string& m) { return Error(ErrorKind::divergence, m); }
inline Error gate_error(const std::string& m) { return Error(ErrorKind::gate, m); }

}  // namespace ssr
