#ifndef LOCRECAL_ERRORS_HPP
#define LOCRECAL_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace locrecal {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or violated precondition.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Iterative method failed to converge within its iteration cap.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, double bracket_lo, double bracket_hi)
      : Error(what), lo_(bracket_lo), hi_(bracket_hi) {}
  explicit NumericError(const std::string& what) : NumericError(what, 0.0, 0.0) {}

  double bracket_lo() const noexcept { return lo_; }
  double bracket_hi() const noexcept { return hi_; }

 private:
  double lo_;
  double hi_;
};

/// Non-finite loss during training.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Malformed input data. Row numbers are 1-based and count the header as row 1.
class LoadError : public Error {
 public:
  LoadError(const std::string& what, std::size_t row, std::string column)
      : Error("row " + std::to_string(row) + ", column '" + column + "': " + what),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Inputs that are individually valid but inconsistent with each other
/// (e.g. row counts that do not line up).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace locrecal

#endif  // LOCRECAL_ERRORS_HPP
