#pragma once

#include <stdexcept>

namespace bimrl {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The probability ratios of a batch are outside the sanity bound: the batch
// was not collected by the current policy.
class StaleBatchError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace bimrl
