#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace l2d {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Experts are identified by a small non-negative integer that stays stable
/// across availability gaps and re-entry.
using ExpertId = int;
using ExpertSet = std::vector<ExpertId>;

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class RegistryError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace l2d
