#ifndef FSM_CHECKPOINT_HPP
#define FSM_CHECKPOINT_HPP

// Parameter checkpoints: magic "FSM1", little-endian manifest (name, dtype,
// shape per parameter), then raw float32 payloads in manifest order. Metadata
// travels in a key=value text sidecar.

#include <string>
#include <utility>
#include <vector>

#include "fsm/autodiff.hpp"

namespace fsm {

using NamedParams = std::vector<std::pair<std::string, ad::Tensor<float>>>;

void save_checkpoint(const std::string& path, const NamedParams& params);

// loaded tensors carry requires_grad=true so they can train further
NamedParams load_checkpoint(const std::string& path);

// assign loaded values into an existing parameter set; names, order and
// shapes must match exactly
void assign_params(NamedParams& dst, const NamedParams& src);

using MetaEntries = std::vector<std::pair<std::string, std::string>>;

void save_meta(const std::string& path, const MetaEntries& entries);
MetaEntries load_meta(const std::string& path);

}  // namespace fsm

#endif
