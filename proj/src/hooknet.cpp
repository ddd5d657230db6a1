#include "dsfwsi/hooknet.hpp"

#include <cstdio>
#include <fstream>

#include "dsfwsi/parallel.hpp"
#include "dsfwsi/rng.hpp"
#include "dsfwsi/tensor_io.hpp"

namespace dsfwsi {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::pair<int, int> center_crop_offset(int ch, int cw, int bh, int bw) {
    if (ch < bh || cw < bw)
        throw ConfigError("context map " + std::to_string(ch) + "x" + std::to_string(cw) +
                          " is smaller than the bottleneck " + std::to_string(bh) + "x" + std::to_string(bw));
    return {(ch - bh) / 2, (cw - bw) / 2};
}

std::pair<int, int> slot_crop_offset(int slot, int grid, int ch, int cw, int bh, int bw) {
    if (ch < bh || cw < bw)
        throw ConfigError("context map " + std::to_string(ch) + "x" + std::to_string(cw) +
                          " is smaller than the bottleneck " + std::to_string(bh) + "x" + std::to_string(bw));
    if (grid < 1 || slot < 0 || slot >= grid * grid) throw ArgumentError("slot index out of range");
    const int row = slot / grid, col = slot % grid;
    auto place = [](int index, int grid, int full, int size) {
        const int cell_lo = index * full / grid;
        const int cell_hi = (index + 1) * full / grid;
        const int start = cell_lo + ((cell_hi - cell_lo) - size) / 2;
        return std::clamp(start, 0, full - size);
    };
    return {place(row, grid, ch, bh), place(col, grid, cw, bw)};
}

namespace {

void check_hook_inputs(const torch::Tensor& context_map, const torch::Tensor& bottleneck) {
    if (context_map.dim() != 4 || bottleneck.dim() != 4)
        throw PreconditionError("hook_features expects B x C x H x W maps");
    if (context_map.size(0) != bottleneck.size(0))
        throw PreconditionError("hook_features: batch sizes differ (" + std::to_string(context_map.size(0)) +
                                " vs " + std::to_string(bottleneck.size(0)) + ")");
}

}  // namespace

HookResult hook_features(const torch::Tensor& context_map, const torch::Tensor& bottleneck) {
    check_hook_inputs(context_map, bottleneck);
    const auto bh = static_cast<int>(bottleneck.size(2)), bw = static_cast<int>(bottleneck.size(3));
    HookResult r;
    r.offset = center_crop_offset(static_cast<int>(context_map.size(2)), static_cast<int>(context_map.size(3)), bh, bw);
    auto crop = context_map.narrow(2, r.offset.first, bh).narrow(3, r.offset.second, bw);
    r.features = torch::cat({bottleneck, crop}, 1);
    return r;
}

torch::Tensor hook_features(const torch::Tensor& context_map, const torch::Tensor& bottleneck,
                            std::span<const std::pair<int, int>> offsets) {
    check_hook_inputs(context_map, bottleneck);
    if (static_cast<std::int64_t>(offsets.size()) != bottleneck.size(0))
        throw PreconditionError("hook_features: one offset per batch item required");
    const auto bh = bottleneck.size(2), bw = bottleneck.size(3);
    if (context_map.size(2) < bh || context_map.size(3) < bw)
        throw ConfigError("context map is smaller than the bottleneck");
    std::vector<torch::Tensor> crops;
    crops.reserve(offsets.size());
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        const auto [oy, ox] = offsets[i];
        if (oy < 0 || ox < 0 || oy + bh > context_map.size(2) || ox + bw > context_map.size(3))
            throw ArgumentError("hook crop offset out of bounds");
        crops.push_back(context_map[static_cast<std::int64_t>(i)].narrow(1, oy, bh).narrow(2, ox, bw));
    }
    return torch::cat({bottleneck, torch::stack(crops)}, 1);
}

// ---------------------------------------------------------------------------

UpBlockImpl::UpBlockImpl(int in_channels, int skip_channels, int out_channels) {
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels + skip_channels, out_channels, 3).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out_channels));
    conv2 = register_module("conv2",
                            nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out_channels));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
    auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                    .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
    auto h = torch::relu(bn1(conv1(torch::cat({up, skip}, 1))));
    return torch::relu(bn2(conv2(h)));
}

DecoderImpl::DecoderImpl(int in_channels, EncoderConfig enc) : in_channels_(in_channels) {
    const auto w = enc.stage_widths();
    widths_ = {w[2], w[1], w[0], w[0]};
    up1 = register_module("up1", UpBlock(in_channels, w[2], widths_[0]));
    up2 = register_module("up2", UpBlock(widths_[0], w[1], widths_[1]));
    up3 = register_module("up3", UpBlock(widths_[1], w[0], widths_[2]));
    up4 = register_module("up4", UpBlock(widths_[2], w[0], widths_[3]));
}

int DecoderImpl::width_at(int depth) const {
    if (depth < 0 || depth > 4) throw ConfigError("decoder depth must lie in [0, 4]");
    return depth == 0 ? in_channels_ : widths_[static_cast<std::size_t>(depth - 1)];
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& bottleneck, const StageFeatureSet& skips, int capture_depth,
                                   torch::Tensor* captured) {
    auto h = bottleneck;
    if (capture_depth == 0 && captured) *captured = h;
    h = up1(h, skips.features[2]);
    if (capture_depth == 1 && captured) *captured = h;
    h = up2(h, skips.features[1]);
    if (capture_depth == 2 && captured) *captured = h;
    h = up3(h, skips.features[0]);
    if (capture_depth == 3 && captured) *captured = h;
    h = up4(h, skips.stem);
    if (capture_depth == 4 && captured) *captured = h;
    return F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

std::string to_string(HookCrop c) { return c == HookCrop::Slot ? "slot" : "center"; }

HookCrop parse_hook_crop(const std::string& s) {
    if (s == "slot") return HookCrop::Slot;
    if (s == "center") return HookCrop::Center;
    throw ConfigError("hook_crop must be 'slot' or 'center', got '" + s + "'");
}

namespace {

void init_decoder_weights(nn::Module& m) {
    torch::NoGradGuard no_grad;
    for (auto& sub : m.modules(false)) {
        if (auto* conv = sub->as<nn::Conv2d>()) {
            nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
            if (conv->bias.defined()) nn::init::zeros_(conv->bias);
        } else if (auto* bn = sub->as<nn::BatchNorm2d>()) {
            nn::init::ones_(bn->weight);
            nn::init::zeros_(bn->bias);
        }
    }
}

}  // namespace

HookNetModelImpl::HookNetModelImpl(HookNetOptions opts, std::uint64_t seed) : opts_(opts) {
    if (opts.classes < 1) throw ConfigError("hooknet: classes must be >= 1");
    if (opts.grid < 1) throw ConfigError("hooknet: grid must be >= 1");
    context_encoder = register_module("context_encoder", make_encoder(opts.encoder, derive_seed(seed, {1})));
    target_encoder = register_module("target_encoder", make_encoder(opts.encoder, derive_seed(seed, {2})));
    torch::manual_seed(derive_seed(seed, {3}));
    const int bottleneck = opts.encoder.stage_widths()[3];
    context_decoder = register_module("context_decoder", Decoder(bottleneck, opts.encoder));
    const int hook_channels = context_decoder->width_at(opts.hook_depth);
    target_decoder = register_module("target_decoder", Decoder(bottleneck + hook_channels, opts.encoder));
    context_head = register_module(
        "context_head", nn::Conv2d(nn::Conv2dOptions(context_decoder->out_channels(), opts.classes, 1)));
    target_head = register_module(
        "target_head", nn::Conv2d(nn::Conv2dOptions(target_decoder->out_channels(), opts.classes, 1)));
    init_decoder_weights(*context_decoder);
    init_decoder_weights(*target_decoder);
}

HookNetOutput HookNetModelImpl::forward(const torch::Tensor& context, const torch::Tensor& target,
                                        std::span<const int> slots) {
    if (context.dim() != 4 || target.dim() != 4 || context.size(0) != target.size(0) ||
        static_cast<std::int64_t>(slots.size()) != target.size(0))
        throw PreconditionError("hooknet forward needs paired context/target batches with one slot per item");
    auto cs = context_encoder->forward_stages(context);
    torch::Tensor hooked;
    auto cmap = context_decoder->forward(cs.features[3], cs, opts_.hook_depth, &hooked);
    HookNetOutput out;
    out.context_logits = context_head(cmap);

    auto ts = target_encoder->forward_stages(target);
    const auto& b = ts.features[3];
    const int ch = static_cast<int>(hooked.size(2)), cw = static_cast<int>(hooked.size(3));
    const int bh = static_cast<int>(b.size(2)), bw = static_cast<int>(b.size(3));
    std::vector<std::pair<int, int>> offsets;
    offsets.reserve(slots.size());
    for (int slot : slots)
        offsets.push_back(opts_.crop == HookCrop::Slot && slot >= 0
                              ? slot_crop_offset(slot, opts_.grid, ch, cw, bh, bw)
                              : center_crop_offset(ch, cw, bh, bw));
    auto joined = hook_features(hooking ? hooked : torch::zeros_like(hooked), b, offsets);
    out.target_logits = target_head(target_decoder->forward(joined, ts));
    return out;
}

// ---------------------------------------------------------------------------

namespace {

torch::Tensor masked_ce(const torch::Tensor& logits, const torch::Tensor& labels, int ignore_index) {
    if (logits.dim() != 4 || labels.dim() != 3 || logits.size(0) != labels.size(0) ||
        logits.size(2) != labels.size(1) || logits.size(3) != labels.size(2))
        throw PreconditionError("seg_loss: logits B x C x H x W and labels B x H x W must align");
    const auto classes = logits.size(1);
    auto lab = labels.to(torch::kLong);
    auto valid = lab != ignore_index;
    if ((valid & ((lab >= classes) | (lab < 0))).any().item<bool>())
        throw ArgumentError("seg_loss: label values must lie in [0, " + std::to_string(classes) +
                            ") or equal ignore_index " + std::to_string(ignore_index));
    if (!valid.any().item<bool>()) return logits.sum() * 0.0;
    return F::cross_entropy(logits, lab, F::CrossEntropyFuncOptions().ignore_index(ignore_index));
}

}  // namespace

torch::Tensor seg_loss(const HookNetOutput& out, const torch::Tensor& target_labels,
                       const torch::Tensor& context_labels, double lambda, int ignore_index) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("seg_loss: lambda must lie in [0, 1]");
    auto loss = masked_ce(out.target_logits, target_labels, ignore_index);
    if (lambda == 1.0) return loss;
    return lambda * loss + (1.0 - lambda) * masked_ce(out.context_logits, context_labels, ignore_index);
}

void init_from_pretrained(HookNetModel& model, const fs::path& checkpoint_dir) {
    load_encoder(model->context_encoder, checkpoint_dir / "encoder_context");
    load_encoder(model->target_encoder, checkpoint_dir / "encoder_target");
}

namespace {

constexpr int kHookNetFormatVersion = 1;

nlohmann::json hooknet_meta(const HookNetOptions& o) {
    return {{"format_version", kHookNetFormatVersion},
            {"kind", "dsfwsi-hooknet"},
            {"base_width", o.encoder.base_width},
            {"bn_momentum", o.encoder.bn_momentum},
            {"classes", o.classes},
            {"hook_depth", o.hook_depth},
            {"grid", o.grid},
            {"hook_crop", to_string(o.crop)}};
}

}  // namespace

void save_hooknet(HookNetModel& model, const fs::path& dir) {
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    save_module_arrays(*model, tmp);
    atomic_write_text(tmp / "meta.json", hooknet_meta(model->options()).dump(2) + "\n");
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

HookNetModel load_hooknet(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IntegrityError("model directory '" + dir.string() + "' has no meta.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw VersionError("model '" + dir.string() + "': unreadable metadata (" + e.what() + ")");
    }
    if (meta.value("format_version", -1) != kHookNetFormatVersion || meta.value("kind", "") != "dsfwsi-hooknet")
        throw VersionError("model '" + dir.string() + "': unsupported format_version");
    HookNetOptions o;
    o.encoder.base_width = meta.at("base_width").get<int>();
    o.encoder.bn_momentum = meta.at("bn_momentum").get<double>();
    o.classes = meta.at("classes").get<int>();
    o.hook_depth = meta.at("hook_depth").get<int>();
    o.grid = meta.at("grid").get<int>();
    o.crop = parse_hook_crop(meta.at("hook_crop").get<std::string>());
    HookNetModel model(o, 0);
    load_module_arrays(*model, dir);
    return model;
}

// ---------------------------------------------------------------------------

void FinetuneConfig::validate() const {
    if (epochs < 0) throw ConfigError("finetune.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be >= 0");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("finetune.fraction must lie in (0, 1]");
    if (folds < 2) throw ConfigError("finetune.folds must be >= 2");
    if (fold < 0 || fold >= folds) throw ConfigError("finetune.fold must lie in [0, folds)");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("finetune.lambda must lie in [0, 1]");
    if (classes < 1 || classes > 255) throw ConfigError("finetune.classes must lie in [1, 255]");
    if (ignore_index >= 0 && ignore_index < classes)
        throw ConfigError("finetune.ignore_index must not be a valid class index");
    if (hook_depth < 0 || hook_depth > 4) throw ConfigError("finetune.hook_depth must lie in [0, 4]");
}

namespace {

torch::Tensor label_tensor(const cv::Mat& label) {
    cv::Mat c = label.isContinuous() ? label : label.clone();
    return torch::from_blob(c.data, {c.rows, c.cols}, torch::kUInt8).to(torch::kLong);
}

}  // namespace

SegData load_seg_data(std::span<const ContextGroup> groups, const fs::path& manifest_dir, const FinetuneConfig& cfg,
                      int workers) {
    struct Loaded {
        torch::Tensor context, context_label;
        std::vector<torch::Tensor> targets, target_labels;
    };
    std::vector<Loaded> loaded(groups.size());
    parallel_for(groups.size(), workers, [&](std::size_t i) {
        const auto& g = groups[i];
        auto need_label = [&](const PatchRecord& r) {
            if (r.label_path.empty())
                throw ValidationError("patch '" + r.patch_id + "' has no label; fine-tuning needs labelled groups");
            return label_tensor(read_label(manifest_dir / r.label_path));
        };
        Loaded l;
        l.context = to_normalized_tensor(read_rgb(patch_image_path(manifest_dir, g.context)), cfg.augmentation);
        l.context_label = need_label(g.context);
        for (const auto& t : g.targets) {
            l.targets.push_back(to_normalized_tensor(read_rgb(patch_image_path(manifest_dir, t)), cfg.augmentation));
            l.target_labels.push_back(need_label(t));
        }
        loaded[i] = std::move(l);
    });
    SegData data;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        data.contexts.push_back(loaded[i].context);
        data.context_labels.push_back(loaded[i].context_label);
        for (std::size_t k = 0; k < groups[i].targets.size(); ++k) {
            const auto& t = groups[i].targets[k];
            data.items.push_back({t.patch_id, groups[i].group_id(), t.slot_index, i, t.label_path});
            data.targets.push_back(loaded[i].targets[k]);
            data.target_labels.push_back(loaded[i].target_labels[k]);
        }
    }
    return data;
}

namespace {

struct SegBatch {
    torch::Tensor context, target, context_label, target_label;
    std::vector<int> slots;
};

SegBatch gather(const SegData& data, std::span<const std::size_t> idx) {
    SegBatch b;
    std::vector<torch::Tensor> c, t, cl, tl;
    for (auto i : idx) {
        const auto& it = data.items[i];
        c.push_back(data.contexts[it.context_index]);
        cl.push_back(data.context_labels[it.context_index]);
        t.push_back(data.targets[i]);
        tl.push_back(data.target_labels[i]);
        b.slots.push_back(it.slot);
    }
    b.context = torch::stack(c);
    b.target = torch::stack(t);
    b.context_label = torch::stack(cl);
    b.target_label = torch::stack(tl);
    return b;
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<torch::Tensor> snapshot(const nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
    for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
    return out;
}

void restore(nn::Module& m, const std::vector<torch::Tensor>& snap) {
    torch::NoGradGuard no_grad;
    std::size_t i = 0;
    for (auto& p : m.parameters()) p.copy_(snap[i++]);
    for (auto& b : m.buffers()) b.copy_(snap[i++]);
}

}  // namespace

ConfusionCounts evaluate_model(HookNetModel& model, const SegData& data, const FinetuneConfig& cfg,
                               std::vector<cv::Mat>* predictions) {
    torch::NoGradGuard no_grad;
    model->eval();
    ConfusionCounts counts(cfg.classes);
    if (predictions) predictions->clear();
    for (std::size_t start = 0; start < data.items.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const auto end = std::min(data.items.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        auto b = gather(data, idx);
        auto out = model->forward(b.context, b.target, b.slots);
        auto pred = out.target_logits.argmax(1).contiguous();
        auto lab = b.target_label.contiguous();
        counts += confusion_counts(std::span<const std::int64_t>(pred.data_ptr<std::int64_t>(), pred.numel()),
                                   std::span<const std::int64_t>(lab.data_ptr<std::int64_t>(), lab.numel()),
                                   cfg.classes, cfg.ignore_index);
        if (predictions) {
            auto p8 = pred.to(torch::kUInt8).contiguous();
            for (std::int64_t k = 0; k < p8.size(0); ++k) {
                auto one = p8[k].contiguous();
                cv::Mat m(static_cast<int>(one.size(0)), static_cast<int>(one.size(1)), CV_8UC1, one.data_ptr());
                predictions->push_back(m.clone());
            }
        }
    }
    return counts;
}

FinetuneResult run_finetune(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                            const FinetuneConfig& cfg, const FinetuneRunOptions& opts) {
    cfg.validate();
    if (groups.empty()) throw ConfigError("fine-tuning needs at least one labelled group");

    std::vector<ContextGroup> train_all, val;
    if (opts.train_is_validation) {
        train_all.assign(groups.begin(), groups.end());
    } else {
        const auto folds = split_folds(groups, cfg.folds, cfg.split_seed);
        std::tie(train_all, val) = fold_partition(groups, folds, cfg.fold);
    }
    const auto picked = subsample_indices(train_all.size(), cfg.fraction, derive_seed(cfg.seed, {0x5B}));
    if (picked.empty())
        throw ConfigError("empty subsample: fraction " + fmt17(cfg.fraction) + " of " +
                          std::to_string(train_all.size()) + " training groups");
    std::vector<ContextGroup> train;
    for (auto i : picked) train.push_back(train_all[i]);
    if (opts.train_is_validation) val = train;

    FinetuneResult result;
    result.train_groups = train.size();
    result.train_groups_available = train_all.size();
    result.val_groups = val.size();

    const int m = train.front().m();
    int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(m))));
    if (grid * grid != m) grid = 1;

    HookNetOptions ho;
    ho.encoder = cfg.encoder;
    ho.classes = cfg.classes;
    ho.hook_depth = cfg.hook_depth;
    ho.grid = grid;
    ho.crop = cfg.hook_crop;
    HookNetModel model(ho, cfg.seed);
    model->hooking = cfg.hooking;
    if (opts.init_checkpoint) init_from_pretrained(model, *opts.init_checkpoint);

    const auto train_data = load_seg_data(train, manifest_dir, cfg, opts.workers);
    const auto val_data = opts.train_is_validation ? train_data : load_seg_data(val, manifest_dir, cfg, opts.workers);
    result.train_patches = train_data.items.size();

    torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate)
                                                          .betas({cfg.beta1, cfg.beta2})
                                                          .eps(cfg.adam_eps)
                                                          .weight_decay(0.0));

    auto validate_epoch = [&](int epoch, double train_loss) {
        auto metrics = make_metrics(evaluate_model(model, val_data, cfg), cfg.fold);
        FinetuneLogRow row{epoch, train_loss, metrics.mean_f1, metrics.micro_f1, metrics.accuracy};
        result.log.push_back(row);
        if (opts.on_epoch) opts.on_epoch(row);
        return metrics;
    };

    std::vector<torch::Tensor> best_state;
    auto consider = [&](int epoch, const Metrics& metrics) {
        if (best_state.empty() || metrics.mean_f1 > result.best.mean_f1) {
            result.best = metrics;
            result.best_epoch = epoch;
            best_state = snapshot(*model);
        }
    };

    if (cfg.epochs == 0) consider(0, validate_epoch(0, 0.0));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        model->train();
        std::vector<std::size_t> order(train_data.items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0xF1}));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            auto b = gather(train_data, std::span<const std::size_t>(order).subspan(start, end - start));
            auto out = model->forward(b.context, b.target, b.slots);
            auto loss = seg_loss(out, b.target_label, b.context_label, cfg.lambda, cfg.ignore_index);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) throw NumericalError("non-finite segmentation loss at epoch " + std::to_string(epoch + 1));
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            loss_sum += value;
            ++batches;
        }
        consider(epoch + 1, validate_epoch(epoch + 1, batches ? loss_sum / batches : 0.0));
    }
    restore(*model, best_state);
    result.best.train_groups = static_cast<std::int64_t>(result.train_groups);
    result.best.val_groups = static_cast<std::int64_t>(result.val_groups);
    result.model = model;

    if (opts.out_dir) {
        const auto& dir = *opts.out_dir;
        fs::create_directories(dir);
        std::string log = "epoch,train_loss,val_mean_f1,val_micro_f1,val_accuracy\n";
        for (const auto& r : result.log)
            log += std::to_string(r.epoch) + ',' + fmt17(r.train_loss) + ',' + fmt17(r.val_mean_f1) + ',' +
                   fmt17(r.val_micro_f1) + ',' + fmt17(r.val_accuracy) + '\n';
        atomic_write_text(dir / "metrics_log.csv", log);
        save_hooknet(model, dir / "model");

        nlohmann::json index = nlohmann::json::array();
        if (opts.dump_predictions) {
            std::vector<cv::Mat> preds;
            evaluate_model(model, val_data, cfg, &preds);
            fs::create_directories(dir / "predictions");
            for (std::size_t i = 0; i < preds.size(); ++i) {
                const auto& item = val_data.items[i];
                const std::string name = item.patch_id + ".png";
                write_label(preds[i], dir / "predictions" / name);
                index.push_back({{"patch_id", item.patch_id},
                                 {"group_id", item.group_id},
                                 {"slot", item.slot},
                                 {"prediction", name},
                                 {"label", (fs::absolute(manifest_dir) / item.label_path).string()}});
            }
            nlohmann::json doc = {{"classes", cfg.classes}, {"ignore_index", cfg.ignore_index}, {"patches", index}};
            atomic_write_text(dir / "predictions" / "index.json", doc.dump(2) + "\n");
        }

        nlohmann::json summary = {
            {"fraction", cfg.fraction},
            {"fold", cfg.fold},
            {"folds", cfg.folds},
            {"seed", cfg.seed},
            {"split_seed", cfg.split_seed},
            {"init", opts.init_checkpoint ? opts.init_checkpoint->string() : std::string("random")},
            {"train_groups", result.train_groups},
            {"train_groups_available", result.train_groups_available},
            {"train_patches", result.train_patches},
            {"val_groups", result.val_groups},
            {"best_epoch", result.best_epoch},
            {"mean_f1", result.best.mean_f1},
            {"micro_f1", result.best.micro_f1},
            {"accuracy", result.best.accuracy},
            {"per_class_f1", result.best.per_class_f1},
            {"support", result.best.support},
            {"pixels", result.best.pixels},
            {"code_version", DSFWSI_VERSION}};
        atomic_write_text(dir / "metrics.json", summary.dump(2) + "\n");
    }
    return result;
}

}  // namespace dsfwsi
