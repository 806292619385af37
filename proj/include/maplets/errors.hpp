#pragma once

#include <stdexcept>
#include <string>

namespace maplets {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// geometry
class DegeneratePlane : public Error {
 public:
  using Error::Error;
};

// plane extraction
class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};
class EmptyFrame : public Error {
 public:
  using Error::Error;
};

// maplet building
class EmptyGraph : public Error {
 public:
  using Error::Error;
};

// plane registration
class InsufficientPairs : public Error {
 public:
  using Error::Error;
};
class RankDeficientNormals : public Error {
 public:
  using Error::Error;
};
class NoConvergence : public Error {
 public:
  using Error::Error;
};

// skeleton optimization
class DisconnectedGraph : public Error {
 public:
  using Error::Error;
};
class SingularNormalEquations : public Error {
 public:
  using Error::Error;
};

// comms
class OutOfRange : public Error {
 public:
  using Error::Error;
};

// file formats and configuration
class FormatError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace maplets
