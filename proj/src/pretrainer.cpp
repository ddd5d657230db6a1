#include "dsfwsi/pretrainer.hpp"

#include "dsfwsi/parallel.hpp"
#include "dsfwsi/tensor_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace dsfwsi {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate must be >= 0");
    if (targets_per_group < 0) throw ConfigError("pretrain.targets_per_group must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("pretrain.checkpoint_every must be >= 0");
    augmentation.validate();
    weights.validate();
    if (!(ctfm.mask_ratio >= 0.0 && ctfm.mask_ratio <= 1.0)) throw ConfigError("ctfm.mask_ratio must lie in [0, 1]");
}

std::string PretrainConfig::hash() const {
    auto j = to_json();
    j["pretrain"].erase("epochs");
    j["pretrain"].erase("checkpoint_every");
    const std::string text = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) h = (h ^ c) * 1099511628211ULL;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<GroupImages> load_group_images(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                                           int workers) {
    std::vector<GroupImages> out(groups.size());
    parallel_for(groups.size(), workers, [&](std::size_t i) {
        const auto& g = groups[i];
        GroupImages gi;
        gi.group_id = g.group_id();
        gi.context = read_rgb(patch_image_path(manifest_dir, g.context));
        for (const auto& t : g.targets) {
            gi.targets.push_back(read_rgb(patch_image_path(manifest_dir, t)));
            gi.target_ids.push_back(t.patch_id);
        }
        out[i] = std::move(gi);
    });
    return out;
}

PreparedBatch prepare_batch(std::span<const GroupImages* const> groups, const PretrainConfig& cfg,
                            std::uint64_t epoch, std::uint64_t step, int workers) {
    if (groups.empty()) throw PreconditionError("prepare_batch needs at least one group");
    const int m_full = static_cast<int>(groups.front()->targets.size());
    for (const auto* g : groups)
        if (static_cast<int>(g->targets.size()) != m_full)
            throw PreconditionError("all groups in a batch must have the same number of targets");
    const int m = (cfg.targets_per_group > 0 && cfg.targets_per_group < m_full) ? cfg.targets_per_group : m_full;
    const int size = groups.front()->context.rows;

    const auto n = groups.size();
    std::vector<torch::Tensor> c1(n), c2(n), t1(n * m), t2(n * m);
    PreparedBatch batch;
    batch.groups = static_cast<int>(n);
    batch.m = m;
    batch.plans_v1.resize(n);
    batch.plans_v2.resize(n);

    parallel_for(n, workers, [&](std::size_t b) {
        const GroupImages& g = *groups[b];
        const std::uint64_t gs = derive_seed(cfg.seed, {epoch, step, static_cast<std::uint64_t>(b)});

        std::vector<int> slots(m_full);
        std::iota(slots.begin(), slots.end(), 0);
        if (m < m_full) {
            Rng pick(derive_seed(gs, {7}));
            std::shuffle(slots.begin(), slots.end(), pick);
            slots.resize(m);
            std::sort(slots.begin(), slots.end());
        }

        auto cp = make_view_pair(g.context, derive_seed(gs, {1}), cfg.augmentation, g.group_id, size);
        c1[b] = cp.view1;
        c2[b] = cp.view2;
        for (int k = 0; k < m; ++k) {
            const int slot = slots[static_cast<std::size_t>(k)];
            auto tp = make_view_pair(g.targets[static_cast<std::size_t>(slot)],
                                     derive_seed(gs, {100 + static_cast<std::uint64_t>(slot)}), cfg.augmentation,
                                     g.target_ids.empty() ? std::string{} : g.target_ids[static_cast<std::size_t>(slot)],
                                     size);
            t1[b * m + k] = tp.view1;
            t2[b * m + k] = tp.view2;
        }
        batch.plans_v1[b] =
            sample_fusion_plan(m, cfg.ctfm.mask_ratio, derive_seed(gs, {2}), cfg.ctfm.shuffle, cfg.ctfm.mask);
        batch.plans_v2[b] = cfg.ctfm.share_plan_across_views
                                ? batch.plans_v1[b]
                                : sample_fusion_plan(m, cfg.ctfm.mask_ratio, derive_seed(gs, {3}), cfg.ctfm.shuffle,
                                                     cfg.ctfm.mask);
    });
    batch.context_v1 = torch::stack(c1);
    batch.context_v2 = torch::stack(c2);
    batch.target_v1 = torch::stack(t1);
    batch.target_v2 = torch::stack(t2);
    return batch;
}

// ---------------------------------------------------------------------------

std::vector<torch::Tensor> PretrainState::parameters() const {
    auto params = encoder->parameters();
    for (auto& p : heads->parameters()) params.push_back(p);
    return params;
}

PretrainState make_pretrain_state(const PretrainConfig& cfg, int m) {
    cfg.validate();
    if (m < 1) throw ConfigError("pretraining needs groups with at least one target");
    PretrainState state;
    state.cfg = cfg;
    state.m = m;
    state.encoder = init_params(derive_seed(cfg.seed, {0xE0}), cfg.encoder);
    HeadBankOptions ho;
    ho.stage_widths = cfg.encoder.stage_widths();
    ho.m = m;
    ho.dense = cfg.dsl_enabled;
    ho.fusion = cfg.ctfm_enabled;
    ho.identity = cfg.identity_heads;
    torch::manual_seed(derive_seed(cfg.seed, {0xE1}));
    state.heads = DSLHeadBank(ho);
    state.optimizer = std::make_unique<torch::optim::Adam>(
        state.parameters(), torch::optim::AdamOptions(cfg.learning_rate)
                                .betas({cfg.beta1, cfg.beta2})
                                .eps(cfg.adam_eps)
                                .weight_decay(0.0));
    return state;
}

LossReport pretrain_step(PretrainState& state, const PreparedBatch& batch, const StepOptions& opts) {
    if (batch.m != state.m)
        throw PreconditionError("batch fuses " + std::to_string(batch.m) + " targets but heads expect " +
                                std::to_string(state.m));
    state.encoder->train();
    state.heads->train();

    const auto B = batch.groups;
    auto ctx1 = state.encoder->forward_stages(Branch::Context, batch.context_v1);
    auto ctx2 = state.encoder->forward_stages(Branch::Context, batch.context_v2);
    auto tgt1 = state.encoder->forward_stages(Branch::Target, batch.target_v1);
    auto tgt2 = state.encoder->forward_stages(Branch::Target, batch.target_v2);

    std::map<Stream, StreamViews> streams;
    for (std::size_t i = 0; i < kStages; ++i) {
        streams[Stream::Context].view1[i] = global_pool(ctx1.features[i]);
        streams[Stream::Context].view2[i] = global_pool(ctx2.features[i]);
        streams[Stream::Target].view1[i] = global_pool(tgt1.features[i]);
        streams[Stream::Target].view2[i] = global_pool(tgt2.features[i]);
    }
    if (state.cfg.ctfm_enabled) {
        for (std::size_t i = 0; i < kStages; ++i) {
            const auto c = streams[Stream::Context].view1[i].size(1);
            streams[Stream::Fusion].view1[i] =
                fuse_batch(streams[Stream::Context].view1[i],
                           streams[Stream::Target].view1[i].reshape({B, batch.m, c}), batch.plans_v1);
            streams[Stream::Fusion].view2[i] =
                fuse_batch(streams[Stream::Context].view2[i],
                           streams[Stream::Target].view2[i].reshape({B, batch.m, c}), batch.plans_v2);
        }
    }

    auto objective = dsl_objective(state.heads, streams, state.cfg.weights);
    if (opts.update || opts.grad_norms) {
        state.optimizer->zero_grad();
        objective.total.backward();
        if (opts.grad_norms) {
            for (const auto& p : state.encoder->named_parameters())
                (*opts.grad_norms)["encoder." + p.key()] =
                    p.value().grad().defined() ? p.value().grad().norm().item<double>() : 0.0;
            for (const auto& p : state.heads->named_parameters())
                (*opts.grad_norms)["heads." + p.key()] =
                    p.value().grad().defined() ? p.value().grad().norm().item<double>() : 0.0;
        }
        if (opts.update) {
            state.optimizer->step();
            ++state.step;
        }
    }
    return objective.report;
}

// ---------------------------------------------------------------------------

namespace {

void write_logs(const fs::path& out_dir, const std::vector<PretrainLogRow>& epochs, const std::string& steps) {
    std::string text = "epoch,L_c,L_t,L_fu,L\n";
    for (const auto& r : epochs)
        text += std::to_string(r.epoch) + ',' + fmt17(r.l_context) + ',' + fmt17(r.l_target) + ',' +
                fmt17(r.l_fusion) + ',' + fmt17(r.total) + '\n';
    atomic_write_text(out_dir / "loss_log.csv", text);
    atomic_write_text(out_dir / "loss_steps.csv", steps);
}

std::string step_row(int epoch, std::int64_t step, const LossReport& r) {
    return std::to_string(epoch) + ',' + std::to_string(step) + ',' + fmt17(r.l_context.value_or(0.0)) + ',' +
           fmt17(r.l_target.value_or(0.0)) + ',' + fmt17(r.l_fusion.value_or(0.0)) + ',' + fmt17(r.total) + '\n';
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IntegrityError("missing '" + path.string() + "'");
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw VersionError("unreadable metadata '" + path.string() + "': " + e.what());
    }
}

nlohmann::json read_checkpoint_meta(const fs::path& dir) {
    auto meta = read_json(dir / "meta.json");
    if (!meta.is_object() || !meta.contains("format_version") || !meta["format_version"].is_number_integer() ||
        meta["format_version"].get<int>() != kCheckpointFormatVersion || meta.value("kind", "") != "dsfwsi-pretrain")
        throw VersionError("checkpoint '" + dir.string() + "': unsupported or corrupt format_version");
    return meta;
}

}  // namespace

std::vector<PretrainLogRow> read_loss_log(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open loss log '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    std::vector<PretrainLogRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        PretrainLogRow r;
        char comma;
        std::istringstream ss(line);
        ss >> r.epoch >> comma >> r.l_context >> comma >> r.l_target >> comma >> r.l_fusion >> comma >> r.total;
        if (!ss) throw ParseError("loss log '" + path.string() + "': malformed row '" + line + "'");
        rows.push_back(r);
    }
    return rows;
}

void save_checkpoint(PretrainState& state, const fs::path& dir) {
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    const auto enc_seed = state.encoder->seed();
    save_encoder(state.encoder->context, Branch::Context, derive_seed(enc_seed, {1}), tmp / "encoder_context");
    save_encoder(state.encoder->target, Branch::Target, derive_seed(enc_seed, {2}), tmp / "encoder_target");
    save_module_arrays(*state.heads, tmp / "heads");
    torch::save(*state.optimizer, (tmp / "optimizer.pt").string());
    nlohmann::json meta = {{"format_version", kCheckpointFormatVersion},
                           {"kind", "dsfwsi-pretrain"},
                           {"epoch", state.epoch},
                           {"step", state.step},
                           {"m", state.m},
                           {"stage_widths", state.cfg.encoder.stage_widths()},
                           {"seed", state.cfg.seed},
                           {"config_hash", state.cfg.hash()},
                           {"config", state.cfg.to_json()},
                           {"code_version", DSFWSI_VERSION}};
    atomic_write_text(tmp / "meta.json", meta.dump(2) + "\n");
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

void load_checkpoint_into(PretrainState& state, const fs::path& dir) {
    const auto meta = read_checkpoint_meta(dir);
    load_encoder(state.encoder->context, dir / "encoder_context");
    load_encoder(state.encoder->target, dir / "encoder_target");
    if (!fs::is_directory(dir / "heads"))
        throw IntegrityError("checkpoint '" + dir.string() + "' has no heads/ arrays");
    load_module_arrays(*state.heads, dir / "heads");
    const fs::path opt = dir / "optimizer.pt";
    if (!fs::exists(opt)) throw IntegrityError("checkpoint '" + dir.string() + "' is missing optimizer state");
    torch::load(*state.optimizer, opt.string());
    state.epoch = meta.value("epoch", 0);
    state.step = meta.value("step", std::int64_t{0});
}

PretrainState load_checkpoint(const fs::path& dir) {
    const auto meta = read_checkpoint_meta(dir);
    auto cfg = PretrainConfig::from_json(meta.at("config"));
    auto state = make_pretrain_state(cfg, meta.at("m").get<int>());
    load_checkpoint_into(state, dir);
    return state;
}

std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix) {
    std::vector<std::string> out;
    if (a.is_object() && b.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (!b.contains(it.key())) {
                out.push_back(key + ": " + it.value().dump() + " -> (absent)");
                continue;
            }
            auto sub = config_diff(it.value(), b[it.key()], key);
            out.insert(out.end(), sub.begin(), sub.end());
        }
        for (auto it = b.begin(); it != b.end(); ++it)
            if (!a.contains(it.key()))
                out.push_back((prefix.empty() ? it.key() : prefix + "." + it.key()) + ": (absent) -> " +
                              it.value().dump());
    } else if (a != b) {
        out.push_back(prefix + ": " + a.dump() + " -> " + b.dump());
    }
    return out;
}

PretrainState run_pretraining(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                              const PretrainConfig& cfg, const PretrainRunOptions& opts) {
    cfg.validate();
    if (groups.empty()) throw ConfigError("pretraining needs at least one group");
    const int m_full = groups.front().m();
    const int m = (cfg.targets_per_group > 0 && cfg.targets_per_group < m_full) ? cfg.targets_per_group : m_full;
    if (cfg.epochs > 0 && std::min<std::size_t>(groups.size(), static_cast<std::size_t>(cfg.batch_size)) < 2)
        throw ConfigError("pretraining needs batches of at least 2 groups (batch-normalized heads)");

    fs::create_directories(opts.out_dir);
    PretrainState state = make_pretrain_state(cfg, m);
    std::vector<PretrainLogRow> epoch_rows;
    std::string steps = "epoch,step,L_c,L_t,L_fu,L\n";

    if (opts.resume_from) {
        const auto meta = read_checkpoint_meta(*opts.resume_from);
        if (meta.value("config_hash", "") != cfg.hash()) {
            auto diff = config_diff(meta.at("config"), cfg.to_json());
            std::string text;
            for (const auto& d : diff) text += (text.empty() ? "" : "; ") + d;
            throw ConfigError("resume refused: config hash " + meta.value("config_hash", std::string("?")) +
                              " != " + cfg.hash() + " (" + text + ")");
        }
        load_checkpoint_into(state, *opts.resume_from);
        const fs::path prior = opts.out_dir / "loss_log.csv";
        if (fs::exists(prior))
            for (const auto& r : read_loss_log(prior))
                if (r.epoch <= state.epoch) epoch_rows.push_back(r);
        const fs::path prior_steps = opts.out_dir / "loss_steps.csv";
        if (fs::exists(prior_steps)) {
            std::ifstream in(prior_steps);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line))
                if (!line.empty() && std::stoi(line.substr(0, line.find(','))) <= state.epoch) steps += line + '\n';
        }
    }

    const auto images = load_group_images(groups, manifest_dir, opts.workers);
    write_logs(opts.out_dir, epoch_rows, steps);

    for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(images.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5A}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        PretrainLogRow sums;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            if (end - start < 2) continue;  // batch-norm needs two rows
            std::vector<const GroupImages*> members;
            for (auto i = start; i < end; ++i) members.push_back(&images[order[i]]);
            auto batch = prepare_batch(members, cfg, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(batches), opts.workers);
            auto report = pretrain_step(state, batch);
            steps += step_row(epoch + 1, state.step, report);
            sums.l_context += report.l_context.value_or(0.0);
            sums.l_target += report.l_target.value_or(0.0);
            sums.l_fusion += report.l_fusion.value_or(0.0);
            sums.total += report.total;
            ++batches;
            if (opts.on_step) opts.on_step(epoch + 1, state.step, report);
        }
        state.epoch = epoch + 1;
        if (batches > 0) {
            PretrainLogRow row;
            row.epoch = state.epoch;
            row.l_context = sums.l_context / batches;
            row.l_target = sums.l_target / batches;
            row.l_fusion = sums.l_fusion / batches;
            row.total = sums.total / batches;
            epoch_rows.push_back(row);
        }
        write_logs(opts.out_dir, epoch_rows, steps);
        if (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d", state.epoch);
            save_checkpoint(state, opts.out_dir / "checkpoints" / name);
        }
    }
    save_checkpoint(state, opts.out_dir / "checkpoint");
    return state;
}

}  // namespace dsfwsi
