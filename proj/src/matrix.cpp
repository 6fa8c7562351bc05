#include "osev/matrix.hpp"

#include <stdexcept>
#include <string>

namespace osev {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("matrix data has " + std::to_string(data_.size()) +
                                " entries, expected " + std::to_string(rows * cols));
  }
}

}  // namespace osev
