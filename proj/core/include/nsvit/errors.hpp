#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace nsvit {

// Violated precondition, invariant, or API contract. Maps to CLI exit code 2.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / format failure. Maps to CLI exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

}  // namespace nsvit

#define NSVIT_REQUIRE(cond, ...)                                          \
  do {                                                                    \
    if (!(cond)) {                                                        \
      throw ::nsvit::ContractError(::nsvit::detail::concat(__VA_ARGS__)); \
    }                                                                     \
  } while (0)

#define NSVIT_IO_REQUIRE(cond, ...)                                 \
  do {                                                              \
    if (!(cond)) {                                                  \
      throw ::nsvit::IoError(::nsvit::detail::concat(__VA_ARGS__)); \
    }                                                               \
  } while (0)
