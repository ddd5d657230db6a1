#include "dsfwsi/dsl_heads.hpp"

#include <cmath>

namespace dsfwsi {

namespace nn = torch::nn;

std::string to_string(Stream s) {
    switch (s) {
        case Stream::Context: return "context";
        case Stream::Target: return "target";
        case Stream::Fusion: return "fusion";
    }
    return "?";
}

ProjectorImpl::ProjectorImpl(int dim) : dim_(dim) {
    fc1 = register_module("fc1", nn::Linear(nn::LinearOptions(dim, dim).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm1d(dim));
    fc2 = register_module("fc2", nn::Linear(nn::LinearOptions(dim, dim).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm1d(dim));
    fc3 = register_module("fc3", nn::Linear(nn::LinearOptions(dim, dim).bias(false)));
    bn3 = register_module("bn3", nn::BatchNorm1d(nn::BatchNorm1dOptions(dim).affine(false)));
}

torch::Tensor ProjectorImpl::forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1(fc1(x)));
    h = torch::relu(bn2(fc2(h)));
    return bn3(fc3(h));
}

PredictorImpl::PredictorImpl(int dim) : dim_(dim), hidden_(std::max(1, dim / 4)) {
    fc1 = register_module("fc1", nn::Linear(nn::LinearOptions(dim, hidden_).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm1d(hidden_));
    fc2 = register_module("fc2", nn::Linear(hidden_, dim));
}

torch::Tensor PredictorImpl::forward(const torch::Tensor& x) { return fc2(torch::relu(bn1(fc1(x)))); }

std::string DSLHeadBankImpl::key(int stage, Stream stream) {
    return "s" + std::to_string(stage + 1) + "_" + to_string(stream);
}

DSLHeadBankImpl::DSLHeadBankImpl(HeadBankOptions opts) : opts_(opts) {
    if (opts.m < 1) throw ConfigError("head bank: m must be >= 1");
    for (int stage : active_stages()) {
        for (Stream s : active_streams()) {
            const int d = input_dim(stage, s);
            projectors_.emplace(key(stage, s), register_module("proj_" + key(stage, s), Projector(d)));
            predictors_.emplace(key(stage, s), register_module("pred_" + key(stage, s), Predictor(d)));
        }
    }
}

std::vector<int> DSLHeadBankImpl::active_stages() const {
    if (opts_.dense) return {0, 1, 2, 3};
    return {3};
}

std::vector<Stream> DSLHeadBankImpl::active_streams() const {
    if (opts_.fusion) return {Stream::Context, Stream::Target, Stream::Fusion};
    return {Stream::Context, Stream::Target};
}

bool DSLHeadBankImpl::has(int stage, Stream stream) const { return projectors_.count(key(stage, stream)) > 0; }

int DSLHeadBankImpl::input_dim(int stage, Stream stream) const {
    if (stage < 0 || stage >= kStages) throw ArgumentError("stage index out of range");
    const int c = opts_.stage_widths[static_cast<std::size_t>(stage)];
    return stream == Stream::Fusion ? (opts_.m + 1) * c : c;
}

void DSLHeadBankImpl::check(const torch::Tensor& x, int stage, Stream stream) const {
    if (!has(stage, stream))
        throw PreconditionError("no head for stage " + std::to_string(stage + 1) + " stream " + to_string(stream));
    if (x.dim() != 2 || x.size(1) != input_dim(stage, stream))
        throw PreconditionError("head " + key(stage, stream) + " expects B x " +
                                std::to_string(input_dim(stage, stream)) + " input, got " + c10::str(x.sizes()));
}

Projector& DSLHeadBankImpl::projector(int stage, Stream stream) {
    auto it = projectors_.find(key(stage, stream));
    if (it == projectors_.end()) throw PreconditionError("no projector " + key(stage, stream));
    return it->second;
}

Predictor& DSLHeadBankImpl::predictor(int stage, Stream stream) {
    auto it = predictors_.find(key(stage, stream));
    if (it == predictors_.end()) throw PreconditionError("no predictor " + key(stage, stream));
    return it->second;
}

torch::Tensor DSLHeadBankImpl::project(const torch::Tensor& x, int stage, Stream stream) {
    check(x, stage, stream);
    if (opts_.identity) return x;
    return projector(stage, stream)->forward(x);
}

torch::Tensor DSLHeadBankImpl::predict(const torch::Tensor& z, int stage, Stream stream) {
    check(z, stage, stream);
    if (opts_.identity) return z;
    return predictor(stage, stream)->forward(z);
}

// ---------------------------------------------------------------------------

void StageWeights::validate() const {
    if (w.size() != kStages)
        throw ArgumentError("stage weights need exactly 4 entries, got " + std::to_string(w.size()));
}

torch::Tensor neg_cosine(const torch::Tensor& p, const torch::Tensor& z) {
    if (p.sizes() != z.sizes()) throw PreconditionError("neg_cosine: shapes differ");
    if (p.dim() == 1) return neg_cosine(p.unsqueeze(0), z.unsqueeze(0));
    if (p.dim() != 2) throw PreconditionError("neg_cosine expects vectors or row batches");
    constexpr double eps = 1e-12;
    auto zs = z.detach();
    auto pn = p / (p.pow(2).sum(1, true) + eps).sqrt();
    auto zn = zs / (zs.pow(2).sum(1, true) + eps).sqrt();
    return -(pn * zn).sum(1).mean();
}

torch::Tensor stage_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                         const torch::Tensor& z1) {
    return 0.5 * neg_cosine(p1, z2) + 0.5 * neg_cosine(p2, z1);
}

double dsl_branch_loss(std::span<const double> stage_losses, const StageWeights& weights) {
    weights.validate();
    if (stage_losses.size() != weights.w.size())
        throw ArgumentError("expected 4 stage losses, got " + std::to_string(stage_losses.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < stage_losses.size(); ++i) s += weights.w[i] * stage_losses[i];
    return s;
}

torch::Tensor dsl_branch_loss(const std::vector<torch::Tensor>& stage_losses, const StageWeights& weights) {
    weights.validate();
    if (stage_losses.size() != weights.w.size())
        throw ArgumentError("expected 4 stage losses, got " + std::to_string(stage_losses.size()));
    torch::Tensor s = weights.w[0] * stage_losses[0];
    for (std::size_t i = 1; i < stage_losses.size(); ++i) s = s + weights.w[i] * stage_losses[i];
    return s;
}

double total_loss(double l_context, double l_target, double l_fusion) { return l_context + l_target + l_fusion; }

DSLObjective dsl_objective(DSLHeadBank& heads, const std::map<Stream, StreamViews>& streams,
                           const StageWeights& weights) {
    weights.validate();
    DSLObjective out;
    torch::Tensor total;
    for (Stream s : heads->active_streams()) {
        auto it = streams.find(s);
        if (it == streams.end())
            throw PreconditionError("dsl objective: missing features for stream " + to_string(s));
        const StreamViews& views = it->second;
        torch::Tensor branch;
        double branch_value = 0.0;
        for (int stage : heads->active_stages()) {
            const auto& x1 = views.view1[static_cast<std::size_t>(stage)];
            const auto& x2 = views.view2[static_cast<std::size_t>(stage)];
            auto z1 = heads->project(x1, stage, s);
            auto z2 = heads->project(x2, stage, s);
            auto p1 = heads->predict(z1, stage, s);
            auto p2 = heads->predict(z2, stage, s);
            auto loss = stage_loss(p1, z2, p2, z1);
            const double value = loss.item<double>();
            if (!std::isfinite(value))
                throw NumericalError("non-finite loss in stream '" + to_string(s) + "' stage " +
                                     std::to_string(stage + 1));
            out.report.stage_loss[static_cast<std::size_t>(s)][static_cast<std::size_t>(stage)] = value;
            const double w = heads->options().dense ? weights.w[static_cast<std::size_t>(stage)] : 1.0;
            auto term = w * loss;
            branch = branch.defined() ? branch + term : term;
            branch_value += w * value;
        }
        switch (s) {
            case Stream::Context: out.report.l_context = branch_value; break;
            case Stream::Target: out.report.l_target = branch_value; break;
            case Stream::Fusion: out.report.l_fusion = branch_value; break;
        }
        total = total.defined() ? total + branch : branch;
        out.report.total += branch_value;
    }
    out.total = total;
    return out;
}

}  // namespace dsfwsi
