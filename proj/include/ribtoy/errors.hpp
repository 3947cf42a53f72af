#pragma once

#include <stdexcept>
#include <string>

namespace ribtoy {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A tensor or argument has the wrong rank or an axis of the wrong length.
struct ShapeError : Error {
  using Error::Error;
};

// A value is outside its documented domain (bad label, bad fraction, ...).
struct ValueError : Error {
  using Error::Error;
};

// An input stream or file does not match its documented binary layout.
struct FormatError : Error {
  using Error::Error;
};

// An API was called in a way its contract forbids (detached loss, missing grad).
struct UsageError : Error {
  using Error::Error;
};

// A non-finite value appeared where the pipeline requires finite numbers.
struct NumericError : Error {
  using Error::Error;
};

// Training left its allowed regime; carries the epoch where it happened.
struct TrainingError : Error {
  int epoch;
  TrainingError(const std::string& msg, int epoch_index)
      : Error(msg), epoch(epoch_index) {}
};

// Marker placement could not find a free spot within the attempt budget.
struct PlacementError : Error {
  using Error::Error;
};

// A class activation map had no positive response to normalize against.
struct DegenerateMapError : Error {
  using Error::Error;
};

}  // namespace ribtoy
