#pragma once

#include <stdexcept>
#include <string>

namespace cmeseg {

/// Broad failure class; the CLI maps each class to a distinct exit status.
enum class ErrorClass { Config, Data, Numeric, Internal };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

#define CMESEG_DEFINE_ERROR(Name, Class)                                      \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorClass::Class, #Name ": " + what) {} \
  };

// tensor-core / fcn8-model
CMESEG_DEFINE_ERROR(ShapeMismatch, Numeric)
CMESEG_DEFINE_ERROR(UnsupportedGeometry, Config)
CMESEG_DEFINE_ERROR(BadWidthScale, Config)
CMESEG_DEFINE_ERROR(InputTooSmall, Data)
CMESEG_DEFINE_ERROR(NoForwardState, Internal)
CMESEG_DEFINE_ERROR(CorruptCheckpoint, Data)
CMESEG_DEFINE_ERROR(DimsMismatch, Data)
// train-engine
CMESEG_DEFINE_ERROR(EmptyDataset, Data)
CMESEG_DEFINE_ERROR(BadTrainConfig, Config)
// dense-crf
CMESEG_DEFINE_ERROR(BadCertainty, Config)
CMESEG_DEFINE_ERROR(NotNormalized, Numeric)
CMESEG_DEFINE_ERROR(TooLarge, Config)
// preprocess
CMESEG_DEFINE_ERROR(ImageTooSmall, Data)
CMESEG_DEFINE_ERROR(NoRetinaFound, Data)
// dataset
CMESEG_DEFINE_ERROR(MissingMask, Data)
CMESEG_DEFINE_ERROR(ExtentMismatch, Data)
CMESEG_DEFINE_ERROR(BadSpec, Config)
CMESEG_DEFINE_ERROR(ImageIoError, Data)
// eval-metrics
CMESEG_DEFINE_ERROR(LengthMismatch, Data)
// cli
CMESEG_DEFINE_ERROR(ConfigError, Config)

#undef CMESEG_DEFINE_ERROR

}  // namespace cmeseg
