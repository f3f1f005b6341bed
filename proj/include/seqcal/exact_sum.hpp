#ifndef SEQCAL_EXACT_SUM_HPP
#define SEQCAL_EXACT_SUM_HPP

#include <vector>

namespace seqcal {

// Order-independent floating-point accumulator. Keeps the running total as a
// list of non-overlapping partials (Shewchuk) so the final value is the
// correctly rounded sum of every added term, whatever the insertion order.
// Two accumulators merge exactly, which makes per-thread partial reductions
// bit-identical to a sequential pass.
class ExactSum {
 public:
  ExactSum() = default;

  void add(double x);
  void merge(const ExactSum& other);
  double value() const;

  ExactSum& operator+=(double x) {
    add(x);
    return *this;
  }

 private:
  std::vector<double> partials_;
};

}  // namespace seqcal

#endif  // SEQCAL_EXACT_SUM_HPP
