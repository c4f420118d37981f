#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kpft/adapter.hpp"
#include "kpft/autograd.hpp"
#include "kpft/tensor.hpp"

namespace kpft {

struct ModelGeometry {
    index layers_enc = 2;
    index layers_dec = 0;  // decoder stack exists for budgeting; forward is encoder-only
    index hidden = 32;     // k
    index ffn = 128;       // feed-forward width
    index heads = 4;
    index vocab = 2;
    index max_seq = 16;
    index classes = 2;

    void validate() const;
};

enum class TrainMode { standard, bitfit };

const char* to_string(TrainMode m);

// Which budget bucket a parameter falls into.
enum class ParamGroup : uint8_t {
    embedding,
    attention,
    ffn,
    layer_norm,
    head,
    adapter_slow,  // shared A matrices
    adapter_fast,  // B / s / t / dense adapter weights
    adapter_bias,
    reintro_bias,  // biases that exist only in bitfit mode
};

enum class InitKind : uint8_t { zeros, ones, normal, kaiming_uniform };

// One entry of the parameter schema. The schema is the single enumeration of
// every tensor in a configuration; building a model allocates exactly these,
// and the budget analyzer counts them without allocating.
struct ParamInfo {
    std::string path;
    index rows = 0;
    index cols = 0;
    bool trainable = false;
    ParamGroup group = ParamGroup::attention;
    InitKind init = InitKind::zeros;
    double init_arg = 0.0;  // stddev for normal, fan-in for kaiming_uniform

    index count() const { return rows * cols; }
};

std::vector<ParamInfo> parameter_schema(const ModelGeometry& g, const AdapterSpec& spec,
                                        TrainMode mode);

struct Param {
    std::string path;
    std::shared_ptr<Tensor2> tensor;
    bool trainable = false;
    ParamGroup group = ParamGroup::attention;
};

struct TokenBatch {
    index batch = 0;
    index seq = 0;
    std::vector<int32_t> ids;  // row-major [batch x seq]
};

class TransformerModel {
  public:
    static TransformerModel build(const ModelGeometry& g, const AdapterSpec& spec,
                                  TrainMode mode, uint64_t seed);

    // Builds the forward graph on the given tape. Every persistent parameter
    // enters the tape as one leaf (shared A matrices included exactly once);
    // the cache maps tensor identity to that leaf.
    Var forward(Tape& tape, const TokenBatch& tokens, VarCache& cache) const;

    // eval convenience: forward on a throwaway tape
    Tensor2 logits(const TokenBatch& tokens) const;

    // all parameters, sorted lexicographically by path
    const std::vector<Param>& parameters() const { return params_; }
    std::vector<const Param*> trainable_parameters() const;
    const Param* find(const std::string& path) const;

    // adapter instances in traversal order (encoder then decoder, attn before ffn)
    const std::vector<AdapterInstance*> adapter_instances();
    const std::vector<std::shared_ptr<Tensor2>>& shared_slow_weights() const {
        return shared_a_;
    }

    ModelGeometry geometry;
    AdapterSpec adapter_spec;
    TrainMode mode = TrainMode::standard;
    uint64_t seed = 0;

  private:
    struct Layer {
        std::shared_ptr<Tensor2> wq, wk, wv, wo;
        std::shared_ptr<Tensor2> bq, bk, bv, bo;  // bitfit only
        std::shared_ptr<Tensor2> ln_attn_gain, ln_attn_bias;
        std::shared_ptr<Tensor2> ffn_wi, ffn_wo, ffn_bi, ffn_bo;
        std::shared_ptr<Tensor2> ln_ffn_gain, ln_ffn_bias;
        std::unique_ptr<AdapterInstance> adapter_attn, adapter_ffn;
    };

    std::vector<Param> params_;
    std::vector<Layer> encoder_;
    std::vector<std::unique_ptr<AdapterInstance>> decoder_adapters_;  // budget stack
    std::vector<std::shared_ptr<Tensor2>> shared_a_;
    std::shared_ptr<Tensor2> tok_embed_, pos_embed_;
    std::shared_ptr<Tensor2> final_ln_gain_, final_ln_bias_;
    std::shared_ptr<Tensor2> head_w_, head_bias_;

    std::shared_ptr<Tensor2> get(const std::string& path) const;
    std::shared_ptr<Tensor2> maybe(const std::string& path) const;
    AdapterInstance wire_adapter(const std::string& prefix) const;
};

}  // namespace kpft
