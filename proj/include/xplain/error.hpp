#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xplain {

enum class ErrorCode {
  InvalidArgument,
  Io,
  // data_ingest
  MissingColumn,
  UnparseableCell,
  EmptyFile,
  AllMissingColumn,
  ClassTooSmall,
  UnknownFeature,
  EmptyDataset,
  // models
  SingleClassTrainingSet,
  NonFiniteLoss,
  DimensionMismatch,
  EmptyTestSet,
  // decompose
  EmptyQuestion,
  GrammarError,
  EmptyGoldSet,
  // registry
  ValidationError,
  DanglingExplainer,
  UnsupportedType,
  UnknownKey,
  // explainers
  DegenerateBackground,
  SingularSystem,
  TooManyFeatures,
  EmptySource,
  NonPositiveWidth,
  NoValidCounterfactual,
  NoCoveringRule,
  // metrics
  ZeroVariance,
  EmptyRuleSet,
  TooFewSamples,
  // synthesis / pipeline
  SlotUnfillable,
  MissingFixture,
  PortInUse,
  StoreCorrupt,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::UnparseableCell: return "UnparseableCell";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::AllMissingColumn: return "AllMissingColumn";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::UnknownFeature: return "UnknownFeature";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::SingleClassTrainingSet: return "SingleClassTrainingSet";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::EmptyQuestion: return "EmptyQuestion";
    case ErrorCode::GrammarError: return "GrammarError";
    case ErrorCode::EmptyGoldSet: return "EmptyGoldSet";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::DanglingExplainer: return "DanglingExplainer";
    case ErrorCode::UnsupportedType: return "UnsupportedType";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::DegenerateBackground: return "DegenerateBackground";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::TooManyFeatures: return "TooManyFeatures";
    case ErrorCode::EmptySource: return "EmptySource";
    case ErrorCode::NonPositiveWidth: return "NonPositiveWidth";
    case ErrorCode::NoValidCounterfactual: return "NoValidCounterfactual";
    case ErrorCode::NoCoveringRule: return "NoCoveringRule";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::EmptyRuleSet: return "EmptyRuleSet";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::SlotUnfillable: return "SlotUnfillable";
    case ErrorCode::MissingFixture: return "MissingFixture";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::StoreCorrupt: return "StoreCorrupt";
  }
  return "Unknown";
}

// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace xplain
