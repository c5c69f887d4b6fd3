#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace divergent {

enum class ErrorKind {
  EmptyComposition,
  NoOxidationStates,
  NonFiniteCoordinate,
  DegenerateLattice,
  InvalidStructure,
  UnknownElement,
  ParseError,
  EmptyStructure,
  MissingBVSParameter,
  NotIonic,
  IncompleteChemicalSystem,
  MalformedPhaseSet,
  NonFiniteEnergy,
  StepOutOfRange,
  DenoiserContractViolation,
  EmptyDataset,
  BudgetExhausted,
  InvalidCardinal,
  RecordRejected,
  ModelNotTrained,
  DivergenceUndefined,
  DivisionBySigmaZero,
  EmptyInput,
  Undefined,
  InsufficientData,
  DegenerateTest,
  InvalidPValue,
  InvalidParameters,
  InvalidConfig,
  SchemaMismatch,
  Io,
  InvariantViolation,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Library-wide exception. Every failure path in the library throws this
/// type; `kind()` identifies the contract that was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace divergent
