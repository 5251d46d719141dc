#pragma once

#include <stdexcept>
#include <string>

namespace bapgan {

// Every failure raised by the library derives from Error. `category()` is the
// stable token used in CLI diagnostics (`ERROR:<category>:`).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "runtime"; }
};

#define BAPGAN_DEFINE_ERROR(Name, token)                              \
  class Name : public Error {                                         \
   public:                                                            \
    using Error::Error;                                               \
    const char* category() const noexcept override { return token; } \
  }

BAPGAN_DEFINE_ERROR(ConfigError, "config");
BAPGAN_DEFINE_ERROR(DimensionError, "dimension");
BAPGAN_DEFINE_ERROR(ContractError, "contract");
BAPGAN_DEFINE_ERROR(RangeError, "range");
BAPGAN_DEFINE_ERROR(IngestionError, "data");
BAPGAN_DEFINE_ERROR(CheckpointError, "checkpoint");
BAPGAN_DEFINE_ERROR(NumericError, "numeric");
BAPGAN_DEFINE_ERROR(NotFoundError, "not-found");
BAPGAN_DEFINE_ERROR(ConflictError, "conflict");

#undef BAPGAN_DEFINE_ERROR

}  // namespace bapgan
