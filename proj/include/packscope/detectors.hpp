#pragma once

#include "packscope/common.hpp"

#include <map>
#include <memory>
#include <optional>

namespace packscope::detect {

enum class ModelKind { FeatureGbt, ByteConv, ImageLinear };

std::string kind_name(ModelKind k);
ModelKind kind_from_name(std::string_view name);

enum class Split { Train, Val, Test };

struct LabeledSample {
    std::string id;
    std::shared_ptr<const Bytes> bytes;
    std::string label;  // benign|malicious, family, or packer class
    std::optional<std::string> packer;
    Split split = Split::Train;
};

struct GbtConfig {
    int trees = 200;
    int depth = 4;
    double learning_rate = 0.1;
    uint64_t seed = 0;
    int min_samples_leaf = 8;
};

struct ByteConvConfig {
    int embed_dim = 8;
    int kernel = 512;
    int stride = 512;
    int channels = 64;
    size_t max_len = 1 << 20;
    int epochs = 6;
    double lr = 0.05;
    double momentum = 0.9;
    int batch = 16;
    uint64_t seed = 0;
};

struct ImageLinearConfig {
    int side = 32;
    uint32_t width = 0;  // 0 = size-based schedule
    uint64_t seed = 0;
    double lr = 0.5;
    int epochs = 120;
    double weight_decay = 2e-4;
};

struct TrainConfig {
    GbtConfig gbt;
    ByteConvConfig byte_conv;
    ImageLinearConfig image_linear;
};

struct DetectorModel {
    ModelKind kind = ModelKind::FeatureGbt;
    std::string schema_version;
    uint64_t train_seed = 0;
    std::vector<std::string> class_names;   // score order
    std::vector<double> train_loss_curve;   // per boosting round / epoch
    std::vector<uint64_t> train_id_hashes;  // split-hygiene witness
    Bytes parameters;

    Bytes serialize() const;
    static DetectorModel deserialize(ByteView blob);
};

// Trains on samples with split == Train. Throws DegenerateLabels when fewer
// than two classes are present. Deterministic given (samples, config, seed).
DetectorModel train_feature_gbt(const std::vector<LabeledSample>& samples, const GbtConfig& cfg);
DetectorModel train_byte_conv(const std::vector<LabeledSample>& samples, const ByteConvConfig& cfg);
DetectorModel train_image_linear(const std::vector<LabeledSample>& samples,
                                 const ImageLinearConfig& cfg);
DetectorModel train_model(ModelKind kind, const std::vector<LabeledSample>& samples,
                          const TrainConfig& cfg);

// per-class probabilities in class_names order
std::vector<double> score(const DetectorModel& model, ByteView bytes);
std::string predict(const DetectorModel& model, ByteView bytes);

struct GroupMetrics {
    double tpr = 0.0, tnr = 0.0, accuracy = 0.0;
    size_t tp = 0, fn = 0, tn = 0, fp = 0;
    size_t total = 0, correct = 0;
    std::vector<size_t> confusion;  // class_names.size()^2, row = truth
};

GroupMetrics metrics_from_counts(size_t tp, size_t fn, size_t tn, size_t fp);

enum class GroupBy { None, Packer, Label };

struct EvalReport {
    std::string model_kind;
    uint64_t seed = 0;
    std::string plan_id;
    std::vector<std::string> class_names;
    std::map<std::string, GroupMetrics> groups;  // "all" for GroupBy::None

    std::string to_json() const;
};

// Scores samples with split == Test; throws SplitLeakage when a test id was
// seen at training time.
EvalReport evaluate(const DetectorModel& model, const std::vector<LabeledSample>& samples,
                    GroupBy group_by, unsigned jobs = 0);

// central-difference gradient checks used by the unit suite; returns the
// maximum relative error across parameters
double byte_conv_gradient_check(const ByteConvConfig& cfg, uint64_t seed);
double image_linear_gradient_check(const ImageLinearConfig& cfg, uint64_t seed);

uint64_t sample_id_hash(const std::string& id);

}  // namespace packscope::detect
