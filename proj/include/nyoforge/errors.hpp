#pragma once

#include <stdexcept>
#include <string>

namespace nyoforge {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// tokenizer
struct EmptyCorpus : Error { using Error::Error; };
struct TargetTooSmall : Error { using Error::Error; };
struct IdOutOfRange : Error { using Error::Error; };

// corpus_stream
struct NoFilesMatched : Error { using Error::Error; };
struct RankOutOfRange : Error { using Error::Error; };
struct IoFailure : Error { using Error::Error; };
struct MalformedRecord : Error { using Error::Error; };

// scheduler
struct AllExhausted : Error { using Error::Error; };
struct StreamStopped : Error { using Error::Error; };
struct SchemaMismatch : Error { using Error::Error; };
struct PlanMismatch : Error { using Error::Error; };

// model_core
struct BadConfig : Error { using Error::Error; };
struct OddHeadDim : Error { using Error::Error; };
struct LengthExceedsContext : Error { using Error::Error; };
struct TraceMismatch : Error { using Error::Error; };
struct AllMasked : Error { using Error::Error; };

// trainer
struct NonFiniteGradient : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct TraceMissing : Error { using Error::Error; };
struct VocabMismatch : Error { using Error::Error; };
struct CheckpointCorrupt : Error { using Error::Error; };

// sft
struct TooLong : Error { using Error::Error; };
struct CheckpointIncompatible : Error { using Error::Error; };

}  // namespace nyoforge
