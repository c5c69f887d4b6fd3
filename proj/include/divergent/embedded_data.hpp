#pragma once

#include <string_view>

// Contents of the files under data/, compiled into the library so that the
// default tables are available without a data directory at runtime.
namespace divergent::embedded {

std::string_view elements_tsv() noexcept;
std::string_view bvs_params_tsv() noexcept;
std::string_view descriptor_scaling_tsv() noexcept;

}  // namespace divergent::embedded
