#pragma once

#include <stdexcept>
#include <string>

namespace xrag {

// Base class for every error raised by the library. CLI entry points catch
// this and turn it into a one-line diagnostic.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not line up; message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// An operation was called outside its contract (non-scalar loss, empty
// routing batch, threshold-mode decision fed to the STE path, ...).
struct ContractError : Error {
  using Error::Error;
};

// Token id or symbol not in the vocabulary.
struct VocabError : Error {
  using Error::Error;
};

// Sequence exceeds a hard length limit that must not be silently truncated.
struct LengthError : Error {
  using Error::Error;
};

// Bad key or value in a config file.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed corpus/task file or duplicate document id.
struct IngestError : Error {
  using Error::Error;
};

// Numeric argument outside its mathematical domain.
struct DomainError : Error {
  using Error::Error;
};

// File could not be opened, read or written.
struct IoError : Error {
  using Error::Error;
};

// Search against a corpus that holds no documents at all.
struct EmptyCorpusError : Error {
  using Error::Error;
};

// Checkpoint file is corrupt or incompatible with the current setup.
struct CheckpointError : Error {
  using Error::Error;
};

}  // namespace xrag
