#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace omnitft {

enum class Errc {
    // schema
    DuplicateFeatureName,
    NoTarget,
    CategoricalTarget,
    ZeroLengthWindow,
    InvalidSchema,
    // ingest
    UnknownFeature,
    UnparsableValue,
    NegativeTime,
    EmptyPatient,
    AllMissingFeature,
    TooFewPatients,
    // labeler
    EmptySegment,
    EmptyScores,
    DegenerateSignal,
    SignalTooShort,
    // sampler
    SeriesTooShort,
    // diffcore
    ShapeMismatch,
    DomainError,
    NonScalarLoss,
    DoubleBackward,
    // model
    CategoryOutOfVocab,
    InvalidConfig,
    // penalties
    AllZeroFutureWeights,
    TooShortHorizon,
    LengthMismatch,
    // trainer
    AllMasked,
    Diverged,
    // evalkit
    EmptySeries,
    // io
    IoError,
    SchemaMismatch,
    BadCheckpoint,
};

constexpr std::string_view errc_name(Errc e) noexcept {
    switch (e) {
    case Errc::DuplicateFeatureName: return "DuplicateFeatureName";
    case Errc::NoTarget: return "NoTarget";
    case Errc::CategoricalTarget: return "CategoricalTarget";
    case Errc::ZeroLengthWindow: return "ZeroLengthWindow";
    case Errc::InvalidSchema: return "InvalidSchema";
    case Errc::UnknownFeature: return "UnknownFeature";
    case Errc::UnparsableValue: return "UnparsableValue";
    case Errc::NegativeTime: return "NegativeTime";
    case Errc::EmptyPatient: return "EmptyPatient";
    case Errc::AllMissingFeature: return "AllMissingFeature";
    case Errc::TooFewPatients: return "TooFewPatients";
    case Errc::EmptySegment: return "EmptySegment";
    case Errc::EmptyScores: return "EmptyScores";
    case Errc::DegenerateSignal: return "DegenerateSignal";
    case Errc::SignalTooShort: return "SignalTooShort";
    case Errc::SeriesTooShort: return "SeriesTooShort";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DomainError: return "DomainError";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::DoubleBackward: return "DoubleBackward";
    case Errc::CategoryOutOfVocab: return "CategoryOutOfVocab";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::AllZeroFutureWeights: return "AllZeroFutureWeights";
    case Errc::TooShortHorizon: return "TooShortHorizon";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::AllMasked: return "AllMasked";
    case Errc::Diverged: return "Diverged";
    case Errc::EmptySeries: return "EmptySeries";
    case Errc::IoError: return "IoError";
    case Errc::SchemaMismatch: return "SchemaMismatch";
    case Errc::BadCheckpoint: return "BadCheckpoint";
    }
    return "Unknown";
}

/// Single exception type for the library; `code()` tells callers which
/// contract was violated.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    [[nodiscard]] Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
    if (!cond) fail(code, what);
}

} // namespace omnitft
