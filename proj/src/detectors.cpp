#include "packscope/detectors.hpp"

#include "packscope/features.hpp"
#include "packscope/pe.hpp"
#include "packscope/visualize.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

namespace packscope::detect {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr const char* kModelSchema = "packscope-model-v1";
constexpr uint32_t kModelMagic = 0x444D5350;  // "PSMD"

// ---- flat little-endian parameter stream ----

struct BlobWriter {
    Bytes out;
    void u8(uint8_t v) { out.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        out.insert(out.end(), s.begin(), s.end());
    }
    void doubles(const std::vector<double>& v) {
        u32(static_cast<uint32_t>(v.size()));
        for (double x : v) f64(x);
    }
};

struct BlobReader {
    ByteView in;
    size_t at = 0;
    void need(size_t n) const {
        if (at + n > in.size()) throw UnparseableInput("model blob truncated");
    }
    uint8_t u8() {
        need(1);
        return in[at++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[at++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[at++]) << (8 * i);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(in.data() + at), n);
        at += n;
        return s;
    }
    std::vector<double> doubles() {
        uint32_t n = u32();
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
};

std::vector<std::string> collect_classes(const std::vector<LabeledSample>& samples) {
    std::set<std::string> names;
    for (const auto& s : samples)
        if (s.split == Split::Train) names.insert(s.label);
    if (names.size() < 2) throw DegenerateLabels("training needs at least two classes");
    return std::vector<std::string>(names.begin(), names.end());
}

std::vector<const LabeledSample*> train_set(const std::vector<LabeledSample>& samples) {
    std::vector<const LabeledSample*> out;
    for (const auto& s : samples)
        if (s.split == Split::Train) out.push_back(&s);
    return out;
}

std::vector<uint64_t> id_hashes(const std::vector<const LabeledSample*>& train) {
    std::vector<uint64_t> out;
    out.reserve(train.size());
    for (const auto* s : train) out.push_back(sample_id_hash(s->id));
    std::sort(out.begin(), out.end());
    return out;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// ---- feature-gbt ----

struct TreeNode {
    int32_t feature = -1;  // -1 = leaf
    double threshold = 0.0;
    int32_t left = -1, right = -1;
    double value = 0.0;
};
using Tree = std::vector<TreeNode>;

feat::FeatureVector features_of(ByteView raw) {
    try {
        auto parsed = pe::parse_pe(raw, pe::Tolerance::Lenient);
        return feat::extract_features(parsed, raw);
    } catch (const Error&) {
        return feat::FeatureVector(feat::kFeatureDim, 0.0);
    }
}

struct GbtTrainer {
    const std::vector<feat::FeatureVector>& rows;
    const GbtConfig& cfg;
    std::vector<std::vector<uint32_t>> sorted_by_feature;  // argsort per feature

    explicit GbtTrainer(const std::vector<feat::FeatureVector>& r, const GbtConfig& c)
        : rows(r), cfg(c) {
        const size_t n = rows.size();
        sorted_by_feature.resize(feat::kFeatureDim);
        std::vector<uint32_t> base(n);
        std::iota(base.begin(), base.end(), 0u);
        for (size_t f = 0; f < feat::kFeatureDim; ++f) {
            sorted_by_feature[f] = base;
            std::stable_sort(sorted_by_feature[f].begin(), sorted_by_feature[f].end(),
                             [&](uint32_t a, uint32_t b) { return rows[a][f] < rows[b][f]; });
        }
    }

    struct Best {
        double gain = -1.0;
        size_t feature = 0;
        double threshold = 0.0;
    };

    // newton leaf weight with L2 lambda 1
    static double leaf_value(double g, double h) { return -g / (h + 1.0); }
    static double score_part(double g, double h) { return g * g / (h + 1.0); }

    void build(Tree& tree, int node, std::vector<char>& mask, int depth,
               const std::vector<double>& grad, const std::vector<double>& hess) {
        double g_sum = 0, h_sum = 0;
        size_t count = 0;
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            g_sum += grad[i];
            h_sum += hess[i];
            count++;
        }
        tree[node].value = leaf_value(g_sum, h_sum) * cfg.learning_rate;
        if (depth >= cfg.depth || count < 2 * static_cast<size_t>(cfg.min_samples_leaf)) return;

        Best best;
        for (size_t f = 0; f < feat::kFeatureDim; ++f) {
            double gl = 0, hl = 0;
            size_t nl = 0;
            const auto& order = sorted_by_feature[f];
            double prev_value = 0;
            bool have_prev = false;
            for (uint32_t idx : order) {
                if (!mask[idx]) continue;
                const double x = rows[idx][f];
                if (have_prev && x > prev_value && nl >= static_cast<size_t>(cfg.min_samples_leaf) &&
                    count - nl >= static_cast<size_t>(cfg.min_samples_leaf)) {
                    const double gr = g_sum - gl, hr = h_sum - hl;
                    const double gain =
                        0.5 * (score_part(gl, hl) + score_part(gr, hr) - score_part(g_sum, h_sum));
                    if (gain > best.gain + 1e-12) {
                        best.gain = gain;
                        best.feature = f;
                        best.threshold = 0.5 * (prev_value + x);
                    }
                }
                gl += grad[idx];
                hl += hess[idx];
                nl++;
                prev_value = x;
                have_prev = true;
            }
        }
        if (best.gain < 0.0) return;

        tree[node].feature = static_cast<int32_t>(best.feature);
        tree[node].threshold = best.threshold;
        tree[node].left = static_cast<int32_t>(tree.size());
        tree.emplace_back();
        tree[node].right = static_cast<int32_t>(tree.size());
        tree.emplace_back();

        std::vector<char> left_mask(mask.size(), 0), right_mask(mask.size(), 0);
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            (rows[i][best.feature] <= tree[node].threshold ? left_mask[i] : right_mask[i]) = 1;
        }
        build(tree, tree[node].left, left_mask, depth + 1, grad, hess);
        build(tree, tree[node].right, right_mask, depth + 1, grad, hess);
    }

    static double predict_tree(const Tree& tree, const feat::FeatureVector& x) {
        int node = 0;
        while (tree[node].feature >= 0)
            node = x[tree[node].feature] <= tree[node].threshold ? tree[node].left
                                                                 : tree[node].right;
        return tree[node].value;
    }
};

void write_trees(BlobWriter& w, const std::vector<Tree>& trees) {
    w.u32(static_cast<uint32_t>(trees.size()));
    for (const auto& t : trees) {
        w.u32(static_cast<uint32_t>(t.size()));
        for (const auto& n : t) {
            w.u32(static_cast<uint32_t>(n.feature));
            w.f64(n.threshold);
            w.u32(static_cast<uint32_t>(n.left));
            w.u32(static_cast<uint32_t>(n.right));
            w.f64(n.value);
        }
    }
}

std::vector<Tree> read_trees(BlobReader& r) {
    std::vector<Tree> trees(r.u32());
    for (auto& t : trees) {
        t.resize(r.u32());
        for (auto& n : t) {
            n.feature = static_cast<int32_t>(r.u32());
            n.threshold = r.f64();
            n.left = static_cast<int32_t>(r.u32());
            n.right = static_cast<int32_t>(r.u32());
            n.value = r.f64();
        }
    }
    return trees;
}

// ---- byte-conv parameter layout ----

struct ConvDims {
    int embed, kernel, stride, channels, classes;
    size_t max_len;

    size_t e_at() const { return 0; }
    size_t e_size() const { return 257 * static_cast<size_t>(embed); }
    size_t wl_at() const { return e_at() + e_size(); }
    size_t w_size() const { return static_cast<size_t>(channels) * kernel * embed; }
    size_t bl_at() const { return wl_at() + w_size(); }
    size_t wg_at() const { return bl_at() + channels; }
    size_t bg_at() const { return wg_at() + w_size(); }
    size_t wo_at() const { return bg_at() + channels; }
    size_t wo_size() const { return static_cast<size_t>(classes) * channels; }
    size_t bo_at() const { return wo_at() + wo_size(); }
    size_t total() const { return bo_at() + classes; }
};

struct ConvGrad {
    std::vector<double> g;
};

// windows of token ids (0..255 data, 256 pad)
std::vector<std::vector<uint16_t>> windows_of(ByteView bytes, const ConvDims& d) {
    const size_t len = std::min(bytes.size(), d.max_len);
    std::vector<std::vector<uint16_t>> out;
    for (size_t start = 0; start < len; start += static_cast<size_t>(d.stride)) {
        std::vector<uint16_t> w(static_cast<size_t>(d.kernel), 256);
        for (size_t k = 0; k < static_cast<size_t>(d.kernel) && start + k < len; ++k)
            w[k] = bytes[start + k];
        out.push_back(std::move(w));
    }
    return out;
}

struct ConvForward {
    VectorXd pooled;             // channels
    std::vector<int> pool_from;  // window index per channel, -1 when empty
    MatrixXd x;                  // windows x (kernel*embed)
    MatrixXd a, gate;            // windows x channels
    VectorXd probs;              // classes
};

ConvForward conv_forward(const std::vector<double>& p, const ConvDims& d,
                         const std::vector<std::vector<uint16_t>>& wins) {
    ConvForward f;
    const auto C = d.channels;
    const size_t kd = static_cast<size_t>(d.kernel) * d.embed;
    Eigen::Map<const MatrixXd> E(p.data() + d.e_at(), d.embed, 257);
    Eigen::Map<const MatrixXd> Wl(p.data() + d.wl_at(), kd, C);
    Eigen::Map<const VectorXd> bl(p.data() + d.bl_at(), C);
    Eigen::Map<const MatrixXd> Wg(p.data() + d.wg_at(), kd, C);
    Eigen::Map<const VectorXd> bg(p.data() + d.bg_at(), C);
    Eigen::Map<const MatrixXd> Wo(p.data() + d.wo_at(), C, d.classes);
    Eigen::Map<const VectorXd> bo(p.data() + d.bo_at(), d.classes);

    const size_t W = wins.size();
    f.pooled = VectorXd::Zero(C);
    f.pool_from.assign(C, -1);
    if (W > 0) {
        f.x.resize(W, kd);
        for (size_t w = 0; w < W; ++w)
            for (int k = 0; k < d.kernel; ++k)
                f.x.block(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(k) * d.embed, 1,
                          d.embed) = E.col(wins[w][k]).transpose();
        f.a = (f.x * Wl).rowwise() + bl.transpose();
        f.gate = ((f.x * Wg).rowwise() + bg.transpose())
                     .unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
        MatrixXd h = f.a.cwiseProduct(f.gate);
        for (int c = 0; c < C; ++c) {
            Eigen::Index wi;
            f.pooled[c] = h.col(c).maxCoeff(&wi);
            f.pool_from[c] = static_cast<int>(wi);
        }
    }
    VectorXd logits = Wo.transpose() * f.pooled + bo;
    const double m = logits.maxCoeff();
    VectorXd e = (logits.array() - m).exp();
    f.probs = e / e.sum();
    return f;
}

double conv_backward(const std::vector<double>& p, const ConvDims& d,
                     const std::vector<std::vector<uint16_t>>& wins, int label,
                     ConvGrad& grad) {
    ConvForward f = conv_forward(p, d, wins);
    const auto C = d.channels;
    const size_t kd = static_cast<size_t>(d.kernel) * d.embed;
    Eigen::Map<const MatrixXd> Wl(p.data() + d.wl_at(), kd, C);
    Eigen::Map<const MatrixXd> Wg(p.data() + d.wg_at(), kd, C);
    Eigen::Map<const MatrixXd> Wo(p.data() + d.wo_at(), C, d.classes);

    Eigen::Map<MatrixXd> dE(grad.g.data() + d.e_at(), d.embed, 257);
    Eigen::Map<MatrixXd> dWl(grad.g.data() + d.wl_at(), kd, C);
    Eigen::Map<VectorXd> dbl(grad.g.data() + d.bl_at(), C);
    Eigen::Map<MatrixXd> dWg(grad.g.data() + d.wg_at(), kd, C);
    Eigen::Map<VectorXd> dbg(grad.g.data() + d.bg_at(), C);
    Eigen::Map<MatrixXd> dWo(grad.g.data() + d.wo_at(), C, d.classes);
    Eigen::Map<VectorXd> dbo(grad.g.data() + d.bo_at(), d.classes);

    VectorXd dlogits = f.probs;
    dlogits[label] -= 1.0;
    dWo += f.pooled * dlogits.transpose();
    dbo += dlogits;
    VectorXd dpool = Wo * dlogits;

    if (!wins.empty()) {
        MatrixXd da = MatrixXd::Zero(f.a.rows(), C);
        MatrixXd dzg = MatrixXd::Zero(f.a.rows(), C);
        for (int c = 0; c < C; ++c) {
            const int w = f.pool_from[c];
            const double dh = dpool[c];
            const double gate = f.gate(w, c);
            da(w, c) = dh * gate;
            dzg(w, c) = dh * f.a(w, c) * gate * (1.0 - gate);
        }
        dWl += f.x.transpose() * da;
        dbl += da.colwise().sum().transpose();
        dWg += f.x.transpose() * dzg;
        dbg += dzg.colwise().sum().transpose();
        MatrixXd dx = da * Wl.transpose() + dzg * Wg.transpose();
        for (size_t w = 0; w < wins.size(); ++w)
            for (int k = 0; k < d.kernel; ++k)
                dE.col(wins[w][k]) +=
                    dx.block(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(k) * d.embed,
                             1, d.embed)
                        .transpose();
    }
    return -std::log(std::max(f.probs[label], 1e-300));
}

std::vector<double> init_params(size_t n, uint64_t seed, double scale) {
    Rng rng(seed);
    std::vector<double> p(n);
    for (auto& x : p) x = (rng.uniform() * 2.0 - 1.0) * scale;
    return p;
}

// ---- image-linear ----

std::vector<double> image_features(ByteView bytes, int side, uint32_t width) {
    std::vector<double> out(static_cast<size_t>(side) * side, 0.0);
    if (bytes.empty()) return out;
    std::optional<uint32_t> w;
    if (width != 0) w = width;
    auto img = viz::binary_to_image(bytes, w);
    if (img.height == 0)  // narrower than one row
        img = viz::binary_to_image(bytes, static_cast<uint32_t>(bytes.size()));
    auto resized = viz::resize_area(img, static_cast<uint32_t>(side));
    for (size_t i = 0; i < out.size(); ++i) out[i] = resized.pixels[i] / 255.0;
    return out;
}

struct SoftmaxReg {
    // params: W (classes x dim) row-major, then b (classes)
    static double loss_and_grad(const std::vector<double>& p, size_t dim, size_t classes,
                                const std::vector<std::vector<double>>& xs,
                                const std::vector<int>& ys, std::vector<double>* grad) {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
        double loss = 0;
        std::vector<double> logits(classes);
        for (size_t i = 0; i < xs.size(); ++i) {
            for (size_t k = 0; k < classes; ++k) {
                double z = p[dim * classes + k];
                const double* wrow = p.data() + k * dim;
                for (size_t j = 0; j < dim; ++j) z += wrow[j] * xs[i][j];
                logits[k] = z;
            }
            const double m = *std::max_element(logits.begin(), logits.end());
            double denom = 0;
            for (double& z : logits) {
                z = std::exp(z - m);
                denom += z;
            }
            for (double& z : logits) z /= denom;
            loss += -std::log(std::max(logits[static_cast<size_t>(ys[i])], 1e-300));
            if (grad) {
                for (size_t k = 0; k < classes; ++k) {
                    const double d = logits[k] - (static_cast<int>(k) == ys[i] ? 1.0 : 0.0);
                    double* gw = grad->data() + k * dim;
                    for (size_t j = 0; j < dim; ++j) gw[j] += d * xs[i][j];
                    (*grad)[dim * classes + k] += d;
                }
            }
        }
        const double inv = 1.0 / static_cast<double>(xs.size());
        if (grad)
            for (double& g : *grad) g *= inv;
        return loss * inv;
    }
};

}  // namespace

uint64_t sample_id_hash(const std::string& id) { return Rng::fnv1a64(id); }

std::string kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::FeatureGbt: return "feature-gbt";
        case ModelKind::ByteConv: return "byte-conv";
        case ModelKind::ImageLinear: return "image-linear";
    }
    return "?";
}

ModelKind kind_from_name(std::string_view name) {
    if (name == "feature-gbt") return ModelKind::FeatureGbt;
    if (name == "byte-conv") return ModelKind::ByteConv;
    if (name == "image-linear") return ModelKind::ImageLinear;
    throw SpecInvalid("unknown detector kind: " + std::string(name));
}

Bytes DetectorModel::serialize() const {
    BlobWriter w;
    w.u32(kModelMagic);
    w.u32(1);
    w.u8(static_cast<uint8_t>(kind));
    w.str(schema_version);
    w.u64(train_seed);
    w.u32(static_cast<uint32_t>(class_names.size()));
    for (const auto& c : class_names) w.str(c);
    w.doubles(train_loss_curve);
    w.u32(static_cast<uint32_t>(train_id_hashes.size()));
    for (uint64_t h : train_id_hashes) w.u64(h);
    w.u32(static_cast<uint32_t>(parameters.size()));
    w.out.insert(w.out.end(), parameters.begin(), parameters.end());
    return std::move(w.out);
}

DetectorModel DetectorModel::deserialize(ByteView blob) {
    BlobReader r{blob};
    if (r.u32() != kModelMagic) throw UnparseableInput("not a model file");
    if (r.u32() != 1) throw UnparseableInput("unsupported model version");
    DetectorModel m;
    m.kind = static_cast<ModelKind>(r.u8());
    m.schema_version = r.str();
    m.train_seed = r.u64();
    m.class_names.resize(r.u32());
    for (auto& c : m.class_names) c = r.str();
    m.train_loss_curve = r.doubles();
    m.train_id_hashes.resize(r.u32());
    for (auto& h : m.train_id_hashes) h = r.u64();
    const uint32_t n = r.u32();
    r.need(n);
    m.parameters.assign(blob.begin() + static_cast<ptrdiff_t>(r.at),
                        blob.begin() + static_cast<ptrdiff_t>(r.at + n));
    return m;
}

// ---- feature-gbt ----

DetectorModel train_feature_gbt(const std::vector<LabeledSample>& samples, const GbtConfig& cfg) {
    auto train = train_set(samples);
    auto classes = collect_classes(samples);

    std::vector<feat::FeatureVector> rows(train.size());
    for (size_t i = 0; i < train.size(); ++i) rows[i] = features_of(view(*train[i]->bytes));

    std::vector<int> y(train.size());
    for (size_t i = 0; i < train.size(); ++i)
        y[i] = static_cast<int>(std::find(classes.begin(), classes.end(), train[i]->label) -
                                classes.begin());

    // binary keeps one sigmoid ensemble; multiclass trains one-vs-rest
    const size_t ensembles = classes.size() == 2 ? 1 : classes.size();
    GbtTrainer trainer(rows, cfg);

    std::vector<std::vector<Tree>> forest(ensembles);
    std::vector<std::vector<double>> scores(ensembles,
                                            std::vector<double>(train.size(), 0.0));
    std::vector<double> loss_curve;

    std::vector<double> grad(train.size()), hess(train.size());
    for (int round = 0; round < cfg.trees; ++round) {
        for (size_t e = 0; e < ensembles; ++e) {
            const int positive = ensembles == 1 ? 1 : static_cast<int>(e);
            for (size_t i = 0; i < train.size(); ++i) {
                const double p = sigmoid(scores[e][i]);
                const double target = y[i] == positive ? 1.0 : 0.0;
                grad[i] = p - target;
                hess[i] = std::max(p * (1.0 - p), 1e-9);
            }
            Tree tree(1);
            std::vector<char> mask(train.size(), 1);
            trainer.build(tree, 0, mask, 0, grad, hess);
            for (size_t i = 0; i < train.size(); ++i)
                scores[e][i] += GbtTrainer::predict_tree(tree, rows[i]);
            forest[e].push_back(std::move(tree));
        }
        double loss = 0;
        for (size_t e = 0; e < ensembles; ++e) {
            const int positive = ensembles == 1 ? 1 : static_cast<int>(e);
            for (size_t i = 0; i < train.size(); ++i) {
                const double p = sigmoid(scores[e][i]);
                const double target = y[i] == positive ? 1.0 : 0.0;
                loss += -(target * std::log(std::max(p, 1e-300)) +
                          (1 - target) * std::log(std::max(1 - p, 1e-300)));
            }
        }
        loss_curve.push_back(loss / static_cast<double>(train.size() * ensembles));
    }

    DetectorModel m;
    m.kind = ModelKind::FeatureGbt;
    m.schema_version = kModelSchema;
    m.train_seed = cfg.seed;
    m.class_names = classes;
    m.train_loss_curve = std::move(loss_curve);
    m.train_id_hashes = id_hashes(train);
    BlobWriter w;
    w.u32(static_cast<uint32_t>(ensembles));
    for (const auto& trees : forest) write_trees(w, trees);
    m.parameters = std::move(w.out);
    return m;
}

// ---- byte-conv ----

DetectorModel train_byte_conv(const std::vector<LabeledSample>& samples,
                              const ByteConvConfig& cfg) {
    auto train = train_set(samples);
    auto classes = collect_classes(samples);

    ConvDims d{cfg.embed_dim, cfg.kernel, cfg.stride, cfg.channels,
               static_cast<int>(classes.size()), cfg.max_len};

    std::vector<std::vector<std::vector<uint16_t>>> wins(train.size());
    std::vector<int> y(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
        wins[i] = windows_of(view(*train[i]->bytes), d);
        y[i] = static_cast<int>(std::find(classes.begin(), classes.end(), train[i]->label) -
                                classes.begin());
    }

    std::vector<double> params = init_params(d.total(), cfg.seed ^ 0xB17EC000ULL, 0.05);
    ConvGrad grad;
    grad.g.assign(d.total(), 0.0);
    std::vector<double> velocity(d.total(), 0.0);

    Rng shuffler(cfg.seed);
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<double> loss_curve;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng r = shuffler.fork(static_cast<uint64_t>(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[r.below(i)]);
        double epoch_loss = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
            const size_t hi = std::min(order.size(), at + static_cast<size_t>(cfg.batch));
            std::fill(grad.g.begin(), grad.g.end(), 0.0);
            for (size_t i = at; i < hi; ++i)
                epoch_loss += conv_backward(params, d, wins[order[i]], y[order[i]], grad);
            double step = cfg.lr / static_cast<double>(hi - at);
            // clip the batch gradient so pathological batches cannot blow up
            double norm_sq = 0;
            for (double g : grad.g) norm_sq += g * g;
            const double norm = std::sqrt(norm_sq) / static_cast<double>(hi - at);
            constexpr double kClip = 5.0;
            if (norm > kClip) step *= kClip / norm;
            for (size_t j = 0; j < params.size(); ++j) {
                velocity[j] = cfg.momentum * velocity[j] - step * grad.g[j];
                params[j] += velocity[j];
            }
        }
        loss_curve.push_back(epoch_loss / static_cast<double>(train.size()));
    }

    DetectorModel m;
    m.kind = ModelKind::ByteConv;
    m.schema_version = kModelSchema;
    m.train_seed = cfg.seed;
    m.class_names = classes;
    m.train_loss_curve = std::move(loss_curve);
    m.train_id_hashes = id_hashes(train);
    BlobWriter w;
    w.u32(static_cast<uint32_t>(cfg.embed_dim));
    w.u32(static_cast<uint32_t>(cfg.kernel));
    w.u32(static_cast<uint32_t>(cfg.stride));
    w.u32(static_cast<uint32_t>(cfg.channels));
    w.u64(cfg.max_len);
    w.doubles(params);
    m.parameters = std::move(w.out);
    return m;
}

// ---- image-linear ----

DetectorModel train_image_linear(const std::vector<LabeledSample>& samples,
                                 const ImageLinearConfig& cfg) {
    auto train = train_set(samples);
    auto classes = collect_classes(samples);
    const size_t dim = static_cast<size_t>(cfg.side) * cfg.side;

    std::vector<std::vector<double>> xs(train.size());
    std::vector<int> ys(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
        xs[i] = image_features(view(*train[i]->bytes), cfg.side, cfg.width);
        ys[i] = static_cast<int>(std::find(classes.begin(), classes.end(), train[i]->label) -
                                 classes.begin());
    }

    std::vector<double> params((dim + 1) * classes.size(), 0.0);
    std::vector<double> grad(params.size());
    std::vector<double> loss_curve;
    const double shrink = 1.0 - cfg.lr * cfg.weight_decay;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double loss =
            SoftmaxReg::loss_and_grad(params, dim, classes.size(), xs, ys, &grad);
        for (size_t j = 0; j < params.size(); ++j)
            params[j] = params[j] * shrink - cfg.lr * grad[j];
        loss_curve.push_back(loss);
    }

    DetectorModel m;
    m.kind = ModelKind::ImageLinear;
    m.schema_version = kModelSchema;
    m.train_seed = cfg.seed;
    m.class_names = classes;
    m.train_loss_curve = std::move(loss_curve);
    m.train_id_hashes = id_hashes(train);
    BlobWriter w;
    w.u32(static_cast<uint32_t>(cfg.side));
    w.u32(cfg.width);
    w.doubles(params);
    m.parameters = std::move(w.out);
    return m;
}

DetectorModel train_model(ModelKind kind, const std::vector<LabeledSample>& samples,
                          const TrainConfig& cfg) {
    switch (kind) {
        case ModelKind::FeatureGbt: return train_feature_gbt(samples, cfg.gbt);
        case ModelKind::ByteConv: return train_byte_conv(samples, cfg.byte_conv);
        case ModelKind::ImageLinear: return train_image_linear(samples, cfg.image_linear);
    }
    throw SpecInvalid("unknown model kind");
}

std::vector<double> score(const DetectorModel& model, ByteView bytes) {
    BlobReader r{view(model.parameters)};
    const size_t k = model.class_names.size();
    if (model.kind == ModelKind::FeatureGbt) {
        const uint32_t ensembles = r.u32();
        auto x = features_of(bytes);
        std::vector<double> raw(ensembles, 0.0);
        for (uint32_t e = 0; e < ensembles; ++e) {
            auto trees = read_trees(r);
            for (const auto& t : trees) raw[e] += GbtTrainer::predict_tree(t, x);
        }
        if (ensembles == 1) {
            const double p = sigmoid(raw[0]);
            return {1.0 - p, p};
        }
        // softmax over one-vs-rest margins
        const double m = *std::max_element(raw.begin(), raw.end());
        double denom = 0;
        std::vector<double> out(k);
        for (size_t i = 0; i < k; ++i) {
            out[i] = std::exp(raw[i] - m);
            denom += out[i];
        }
        for (auto& v : out) v /= denom;
        return out;
    }
    if (model.kind == ModelKind::ByteConv) {
        ConvDims d{};
        d.embed = static_cast<int>(r.u32());
        d.kernel = static_cast<int>(r.u32());
        d.stride = static_cast<int>(r.u32());
        d.channels = static_cast<int>(r.u32());
        d.max_len = r.u64();
        d.classes = static_cast<int>(k);
        auto params = r.doubles();
        auto f = conv_forward(params, d, windows_of(bytes, d));
        return std::vector<double>(f.probs.data(), f.probs.data() + k);
    }
    // image-linear
    const int side = static_cast<int>(r.u32());
    const uint32_t width = r.u32();
    auto params = r.doubles();
    auto x = image_features(bytes, side, width);
    const size_t dim = x.size();
    std::vector<double> logits(k);
    for (size_t c = 0; c < k; ++c) {
        double z = params[dim * k + c];
        for (size_t j = 0; j < dim; ++j) z += params[c * dim + j] * x[j];
        logits[c] = z;
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double denom = 0;
    for (auto& z : logits) {
        z = std::exp(z - m);
        denom += z;
    }
    for (auto& z : logits) z /= denom;
    return logits;
}

std::string predict(const DetectorModel& model, ByteView bytes) {
    auto s = score(model, bytes);
    return model.class_names[static_cast<size_t>(
        std::max_element(s.begin(), s.end()) - s.begin())];
}

GroupMetrics metrics_from_counts(size_t tp, size_t fn, size_t tn, size_t fp) {
    GroupMetrics m;
    m.tp = tp;
    m.fn = fn;
    m.tn = tn;
    m.fp = fp;
    m.total = tp + fn + tn + fp;
    m.correct = tp + tn;
    m.tpr = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.tnr = (tn + fp) ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 0.0;
    m.accuracy = m.total ? static_cast<double>(m.correct) / static_cast<double>(m.total) : 0.0;
    return m;
}

EvalReport evaluate(const DetectorModel& model, const std::vector<LabeledSample>& samples,
                    GroupBy group_by, unsigned jobs) {
    std::vector<const LabeledSample*> test;
    for (const auto& s : samples)
        if (s.split == Split::Test) test.push_back(&s);

    for (const auto* s : test)
        if (std::binary_search(model.train_id_hashes.begin(), model.train_id_hashes.end(),
                               sample_id_hash(s->id)))
            throw SplitLeakage("test sample was seen in training: " + s->id);

    std::vector<std::string> predictions(test.size());
    parallel_for(test.size(), jobs,
                 [&](size_t i) { predictions[i] = predict(model, view(*test[i]->bytes)); });

    const size_t k = model.class_names.size();
    auto class_index = [&](const std::string& name) -> int {
        auto it = std::find(model.class_names.begin(), model.class_names.end(), name);
        return it == model.class_names.end() ? -1
                                             : static_cast<int>(it - model.class_names.begin());
    };
    const bool binary =
        k == 2 && class_index("malicious") >= 0 && class_index("benign") >= 0;

    EvalReport report;
    report.model_kind = kind_name(model.kind);
    report.seed = model.train_seed;
    report.class_names = model.class_names;

    std::map<std::string, std::vector<size_t>> groups;
    for (size_t i = 0; i < test.size(); ++i) {
        std::string key = "all";
        if (group_by == GroupBy::Packer) key = test[i]->packer.value_or("none");
        if (group_by == GroupBy::Label) key = test[i]->label;
        groups[key].push_back(i);
    }

    for (const auto& [key, members] : groups) {
        GroupMetrics m;
        m.confusion.assign(k * k, 0);
        size_t tp = 0, fn = 0, tn = 0, fp = 0;
        for (size_t i : members) {
            const int truth = class_index(test[i]->label);
            const int pred = class_index(predictions[i]);
            if (truth >= 0 && pred >= 0)
                m.confusion[static_cast<size_t>(truth) * k + static_cast<size_t>(pred)]++;
            if (binary) {
                const bool truth_mal = test[i]->label == "malicious";
                const bool pred_mal = predictions[i] == "malicious";
                if (truth_mal && pred_mal) tp++;
                if (truth_mal && !pred_mal) fn++;
                if (!truth_mal && !pred_mal) tn++;
                if (!truth_mal && pred_mal) fp++;
            }
            m.total++;
            if (predictions[i] == test[i]->label) m.correct++;
        }
        if (binary) {
            GroupMetrics counts = metrics_from_counts(tp, fn, tn, fp);
            counts.confusion = std::move(m.confusion);
            counts.total = m.total;
            counts.correct = m.correct;
            counts.accuracy =
                m.total ? static_cast<double>(m.correct) / static_cast<double>(m.total) : 0.0;
            report.groups[key] = std::move(counts);
        } else {
            m.accuracy =
                m.total ? static_cast<double>(m.correct) / static_cast<double>(m.total) : 0.0;
            report.groups[key] = std::move(m);
        }
    }
    return report;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["model_kind"] = model_kind;
    j["seed"] = seed;
    if (!plan_id.empty()) j["plan_id"] = plan_id;
    j["class_names"] = class_names;
    j["groups"] = nlohmann::json::object();
    for (const auto& [key, m] : groups) {
        j["groups"][key] = {{"tpr", m.tpr},       {"tnr", m.tnr}, {"accuracy", m.accuracy},
                            {"tp", m.tp},         {"fn", m.fn},   {"tn", m.tn},
                            {"fp", m.fp},         {"total", m.total},
                            {"correct", m.correct}, {"confusion", m.confusion}};
    }
    return j.dump(2);
}

// ---- gradient checks ----

namespace {

double conv_batch_loss(const std::vector<double>& p, const ConvDims& d,
                       const std::vector<std::vector<std::vector<uint16_t>>>& wins,
                       const std::vector<int>& ys) {
    double loss = 0;
    for (size_t i = 0; i < wins.size(); ++i) {
        auto f = conv_forward(p, d, wins[i]);
        loss += -std::log(std::max(f.probs[ys[i]], 1e-300));
    }
    return loss / static_cast<double>(wins.size());
}

}  // namespace

double byte_conv_gradient_check(const ByteConvConfig& cfg, uint64_t seed) {
    ConvDims d{cfg.embed_dim, cfg.kernel, cfg.stride, cfg.channels, 2, cfg.max_len};
    Rng rng(seed);
    std::vector<std::vector<std::vector<uint16_t>>> wins;
    std::vector<int> ys;
    for (int i = 0; i < 3; ++i) {
        Bytes data = rng.fork(i).bytes(static_cast<size_t>(cfg.kernel) * 3 - i * 7);
        wins.push_back(windows_of(view(data), d));
        ys.push_back(i % 2);
    }
    std::vector<double> params = init_params(d.total(), seed ^ 0x6C0FFEE, 0.08);

    ConvGrad grad;
    grad.g.assign(d.total(), 0.0);
    for (size_t i = 0; i < wins.size(); ++i) conv_backward(params, d, wins[i], ys[i], grad);
    for (auto& g : grad.g) g /= static_cast<double>(wins.size());

    // the global max-pool makes the loss piecewise-smooth; a coordinate whose
    // perturbation flips a pooling argmax sits on a kink where the two-sided
    // difference is meaningless, so those draws are skipped
    auto pool_pattern = [&](const std::vector<double>& pp) {
        std::vector<int> pattern;
        for (const auto& w : wins) {
            auto f = conv_forward(pp, d, w);
            pattern.insert(pattern.end(), f.pool_from.begin(), f.pool_from.end());
        }
        return pattern;
    };
    const auto base_pattern = pool_pattern(params);

    Rng pick(seed ^ 0x9);
    double worst = 0;
    const double eps = 1e-5;
    for (int trial = 0; trial < 220; ++trial) {
        const size_t j = pick.below(params.size());
        auto plus = params, minus = params;
        plus[j] += eps;
        minus[j] -= eps;
        if (pool_pattern(plus) != base_pattern || pool_pattern(minus) != base_pattern) continue;
        const double numeric =
            (conv_batch_loss(plus, d, wins, ys) - conv_batch_loss(minus, d, wins, ys)) /
            (2 * eps);
        // floored relative error: coordinates far below the loss scale are
        // held to absolute accuracy instead
        const double denom = std::max({1e-6, std::abs(numeric), std::abs(grad.g[j])});
        worst = std::max(worst, std::abs(numeric - grad.g[j]) / denom);
    }
    return worst;
}

double image_linear_gradient_check(const ImageLinearConfig& cfg, uint64_t seed) {
    const size_t dim = static_cast<size_t>(cfg.side) * cfg.side;
    const size_t classes = 3;
    Rng rng(seed);
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> x(dim);
        for (auto& v : x) v = rng.uniform();
        xs.push_back(std::move(x));
        ys.push_back(i % static_cast<int>(classes));
    }
    std::vector<double> params((dim + 1) * classes);
    for (auto& p : params) p = (rng.uniform() - 0.5) * 0.2;

    std::vector<double> grad(params.size());
    SoftmaxReg::loss_and_grad(params, dim, classes, xs, ys, &grad);

    Rng pick(seed ^ 0x7);
    double worst = 0;
    const double eps = 1e-6;
    for (int trial = 0; trial < 200; ++trial) {
        const size_t j = pick.below(params.size());
        auto plus = params, minus = params;
        plus[j] += eps;
        minus[j] -= eps;
        const double lp = SoftmaxReg::loss_and_grad(plus, dim, classes, xs, ys, nullptr);
        const double lm = SoftmaxReg::loss_and_grad(minus, dim, classes, xs, ys, nullptr);
        const double numeric = (lp - lm) / (2 * eps);
        const double denom = std::max({1e-6, std::abs(numeric), std::abs(grad[j])});
        worst = std::max(worst, std::abs(numeric - grad[j]) / denom);
    }
    return worst;
}

}  // namespace packscope::detect
