#pragma once

#include <stdexcept>
#include <string>

namespace agnofed {

// Malformed inputs: distributions that do not normalize, dimension
// mismatches, out-of-range ids, bad config values.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A request that is well-formed but too large to enumerate exactly.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Binary/text input with the wrong layout (e.g. bad IDX magic).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Two inputs that are individually valid but disagree (e.g. image and
// label counts).
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace agnofed
