#include <nlohmann/json.hpp>

#include "bytes.hpp"
#include "mad/model.hpp"

namespace mad {

std::vector<std::uint8_t> encode_checkpoint(const ParamVector& params) {
  params.check();
  auto arch = nlohmann::json::parse(params.arch.to_text());
  arch["origin"] = to_string(params.origin);
  detail::ByteWriter w;
  w.raw("MADW", 4);
  w.u32(kCheckpointVersion);
  w.text(arch.dump());
  w.u64(std::uint64_t(params.values.size()));
  for (Eigen::Index i = 0; i < params.values.size(); ++i) w.f64(params.values(i));
  return std::move(w.bytes());
}

ParamVector decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.magic(4) != "MADW") throw FormatError("bad checkpoint magic", 0);
  const auto version_at = r.pos();
  if (r.u32("version") != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version", version_at);
  const auto text_at = r.pos();
  const std::string text = r.text("architecture text");
  ParamVector p;
  try {
    auto j = nlohmann::json::parse(text);
    p.origin = origin_from_string(j.value("origin", "initialized"));
    j.erase("origin");
    p.arch = ArchDescriptor::from_text(j.dump());
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad architecture text: ") + e.what(), text_at);
  }
  const auto d_at = r.pos();
  const auto d = r.u64("parameter count");
  if (d != std::uint64_t(p.arch.parameter_count()))
    throw FormatError("parameter count disagrees with architecture", d_at);
  if (r.remaining() != d * 8) throw FormatError("payload length mismatch", r.pos());
  p.values.resize(Eigen::Index(d));
  for (std::uint64_t i = 0; i < d; ++i) p.values(Eigen::Index(i)) = r.f64("parameters");
  return p;
}

void save_checkpoint(const std::string& path, const ParamVector& params) {
  detail::write_file(path, encode_checkpoint(params));
}

ParamVector load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace mad
