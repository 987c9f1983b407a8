#include "latentcf/errors.hpp"

namespace latentcf {

BudgetExhaustedError::BudgetExhaustedError(int64_t accepted, int64_t requested, int64_t draws)
    : Error("rejection sampling budget exhausted: accepted " + std::to_string(accepted) + " of " +
            std::to_string(requested) + " after " + std::to_string(draws) + " draws"),
      accepted_(accepted),
      requested_(requested),
      draws_(draws) {}

DivergenceError::DivergenceError(int64_t iteration, const std::string& detail)
    : Error("non-finite loss at iteration " + std::to_string(iteration) +
            (detail.empty() ? std::string() : ": " + detail)),
      iteration_(iteration),
      detail_(detail) {}

QualityGateError::QualityGateError(const std::string& role, double measured, double floor)
    : Error(role + " accuracy " + std::to_string(measured) + " is below the floor " + std::to_string(floor)),
      measured_(measured),
      floor_(floor) {}

}  // namespace latentcf
