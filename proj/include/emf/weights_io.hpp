#pragma once

#include <string>

#include "emf/backbone.hpp"
#include "emf/tensor.hpp"

namespace emf {

/// Writes a model to the "EMFW" container:
///   magic "EMFW" | u32 LE manifest length | UTF-8 JSON manifest | f32 LE blob
/// where the manifest is a list of {name, shape, dtype:"f32", offset, form}
/// and offsets index into the blob. Write is atomic (temp file + rename).
void save_model(const std::string& path, const Model& m);

/// Loads an "EMFW" file. The architecture configuration is reconstructed
/// from the manifest names and shapes; every tensor named by the skeleton
/// must be present with a matching shape.
Model load_model(const std::string& path);

/// Reads only the form marker of an "EMFW" file.
ModelForm peek_model_form(const std::string& path);

/// Flat tensor file: magic "EMFT" | u32 LE rank | u32 LE dims | f32 LE data.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

}  // namespace emf
