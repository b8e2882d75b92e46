#pragma once

#include <stdexcept>
#include <string>

namespace ssvep {

// Error categories map onto the CLI exit codes: usage -> 2, data -> 3,
// numeric -> 4.
enum class ErrorKind { usage, data, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& m) {
  throw Error(ErrorKind::usage, m);
}
[[noreturn]] inline void fail_data(const std::string& m) {
  throw Error(ErrorKind::data, m);
}
[[noreturn]] inline void fail_numeric(const std::string& m) {
  throw Error(ErrorKind::numeric, m);
}

inline void require_usage(bool cond, const std::string& m) {
  if (!cond) fail_usage(m);
}
inline void require_data(bool cond, const std::string& m) {
  if (!cond) fail_data(m);
}

}  // namespace ssvep
