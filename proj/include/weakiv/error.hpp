#pragma once

#include <stdexcept>
#include <string>

namespace weakiv {

// Bad user input: missing columns, unparsable cells, invalid options, rank
// deficiency in supplied regressors. The CLI maps this to exit code 2.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A computation hit a degenerate configuration (singular moment covariance,
// zero identification, optimizer blow-up). The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace weakiv
