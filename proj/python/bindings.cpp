#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <optional>

#include "cqfuse/config.hpp"
#include "cqfuse/model.hpp"
#include "cqfuse/sim.hpp"

namespace py = pybind11;
using namespace cqf;

namespace {

Tensor tensor_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  Tensor t(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::memcpy(t.data(), a.data(), sizeof(double) * t.size());
  return t;
}

py::array_t<double> array_from(const Tensor& t) {
  py::array_t<double> a({t.rows(), t.cols()});
  std::memcpy(a.mutable_data(), t.data(), sizeof(double) * t.size());
  return a;
}

py::array_t<std::uint8_t> mask_array(const fusion::AttnMask& m) {
  py::array_t<std::uint8_t> a({m.n, m.n});
  std::memcpy(a.mutable_data(), m.blocked.data(), m.blocked.size());
  return a;
}

fusion::AlignedBatch batch_of(const py::array_t<double>& centers,
                              const py::array_t<double>& scores,
                              const std::vector<bool>& valid) {
  fusion::AlignedBatch b;
  b.c_all = tensor_from(centers);
  b.s_all = tensor_from(scores);
  if (valid.size() != b.c_all.rows() || b.s_all.rows() != b.c_all.rows())
    throw std::invalid_argument("centers, scores, and valid must agree on the slot count");
  b.q_all = Tensor(b.c_all.rows(), 1);
  b.valid.assign(valid.begin(), valid.end());
  b.slot_agent.assign(valid.size(), 0);
  b.k = valid.size();
  b.d = 1;
  b.c = b.s_all.cols();
  return b;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cooperative query fusion core";

  // ---- geometry ----
  py::class_<Vec3>(m, "Vec3")
      .def(py::init<>())
      .def(py::init<double, double, double>(), py::arg("x"), py::arg("y"), py::arg("z"))
      .def_readwrite("x", &Vec3::x)
      .def_readwrite("y", &Vec3::y)
      .def_readwrite("z", &Vec3::z)
      .def("__repr__", [](const Vec3& v) {
        return "Vec3(" + std::to_string(v.x) + ", " + std::to_string(v.y) + ", " +
               std::to_string(v.z) + ")";
      });

  py::class_<Pose>(m, "Pose")
      .def(py::init<>())
      .def_static(
          "from_yaw",
          [](double yaw, double x, double y, double z) {
            return Pose::from_yaw(yaw, {x, y, z});
          },
          py::arg("yaw"), py::arg("x"), py::arg("y"), py::arg("z") = 0.0)
      .def_readonly("translation", &Pose::translation);

  py::class_<Transform>(m, "Transform")
      .def(py::init<>())
      .def_static("from_pose", &Transform::from_pose)
      .def("matrix",
           [](const Transform& t) {
             py::array_t<double> a({static_cast<std::size_t>(4), static_cast<std::size_t>(4)});
             std::memcpy(a.mutable_data(), t.flat().data(), sizeof(double) * 16);
             return a;
           })
      .def("apply", [](const Transform& t, double x, double y, double z) {
        const Vec3 p = transform_point(t, {x, y, z});
        return py::make_tuple(p.x, p.y, p.z);
      });

  m.def("compose", &compose, py::arg("a"), py::arg("b"),
        "a applied after b: compose(a, b) maps through b first");
  m.def("invert", &invert);
  m.def("relative_transform", &relative_transform, py::arg("cav"), py::arg("ego"),
        "maps points in the cav frame into the ego frame");
  m.def("normalize_yaw", &normalize_yaw);

  py::class_<BBox3D>(m, "BBox3D")
      .def(py::init([](double x, double y, double z, double length, double width,
                       double height, double yaw) {
             return BBox3D({x, y, z}, length, width, height, yaw);
           }),
           py::arg("x"), py::arg("y"), py::arg("z"), py::arg("length"), py::arg("width"),
           py::arg("height"), py::arg("yaw") = 0.0)
      .def_readonly("center", &BBox3D::center)
      .def_readonly("length", &BBox3D::length)
      .def_readonly("width", &BBox3D::width)
      .def_readonly("height", &BBox3D::height)
      .def_readonly("yaw", &BBox3D::yaw);

  m.def("bev_iou", &bev_iou, py::arg("a"), py::arg("b"),
        "intersection-over-union of the rotated BEV footprints");

  // ---- wire ----
  m.def("bandwidth_bits", &wire::bandwidth_bits, py::arg("k"), py::arg("d"), py::arg("c"),
        "transmitted bits: k * (d + 3 + c) * 32");
  m.def("format_megabits", &wire::format_megabits, py::arg("bits"),
        "megabits with three decimals, e.g. '0.416'");

  py::class_<wire::QueryPayload>(m, "QueryPayload")
      .def_readonly("agent_id", &wire::QueryPayload::agent_id)
      .def_readonly("k", &wire::QueryPayload::k)
      .def_readonly("d", &wire::QueryPayload::d)
      .def_readonly("c", &wire::QueryPayload::c)
      .def("features",
           [](const wire::QueryPayload& p) {
             py::array_t<float> a({static_cast<std::size_t>(p.k), static_cast<std::size_t>(p.d)});
             std::memcpy(a.mutable_data(), p.features.data(), sizeof(float) * p.features.size());
             return a;
           })
      .def("centers",
           [](const wire::QueryPayload& p) {
             py::array_t<float> a({static_cast<std::size_t>(p.k), static_cast<std::size_t>(3)});
             std::memcpy(a.mutable_data(), p.centers.data(), sizeof(float) * p.centers.size());
             return a;
           })
      .def("scores",
           [](const wire::QueryPayload& p) {
             py::array_t<float> a({static_cast<std::size_t>(p.k), static_cast<std::size_t>(p.c)});
             std::memcpy(a.mutable_data(), p.scores.data(), sizeof(float) * p.scores.size());
             return a;
           })
      .def("__eq__", [](const wire::QueryPayload& a, const wire::QueryPayload& b) {
        return a == b;
      });

  m.def(
      "make_payload",
      [](const py::array_t<double>& features, const py::array_t<double>& centers,
         const py::array_t<double>& scores, const Pose& pose, std::uint32_t agent_id) {
        return wire::make_payload(tensor_from(features), tensor_from(centers),
                                  tensor_from(scores), pose, agent_id);
      },
      py::arg("features"), py::arg("centers"), py::arg("scores"), py::arg("pose") = Pose(),
      py::arg("agent_id") = 0);
  m.def(
      "top_k_select",
      [](const py::array_t<double>& features, const py::array_t<double>& centers,
         const py::array_t<double>& scores, std::size_t k, const Pose& pose,
         std::uint32_t agent_id) {
        return wire::top_k_select(tensor_from(features), tensor_from(centers),
                                  tensor_from(scores), k, pose, agent_id);
      },
      py::arg("features"), py::arg("centers"), py::arg("scores"), py::arg("k"),
      py::arg("pose") = Pose(), py::arg("agent_id") = 0,
      "keep the k rows with the largest max class score");
  m.def("serialize", [](const wire::QueryPayload& p) {
    const auto f = wire::serialize(p);
    return py::bytes(reinterpret_cast<const char*>(f.bytes.data()), f.bytes.size());
  });
  m.def("deserialize", [](const py::bytes& b) {
    std::string_view view = b;
    wire::WireFrame f;
    f.bytes.assign(view.begin(), view.end());
    return wire::deserialize(f);
  });

  // ---- interaction gates ----
  m.def(
      "build_qsm",
      [](const std::vector<bool>& valid) {
        std::vector<std::uint8_t> v(valid.begin(), valid.end());
        return mask_array(fusion::build_qsm(v));
      },
      py::arg("valid"), "blocked pairs where either slot is padding");
  m.def(
      "build_pcm",
      [](const py::array_t<double>& centers, double tau) {
        return mask_array(fusion::build_pcm(tensor_from(centers), tau));
      },
      py::arg("centers"), py::arg("tau"),
      "blocked pairs whose 3-D center distance exceeds tau");
  m.def(
      "build_ssm",
      [](const py::array_t<double>& scores, double theta) {
        return mask_array(fusion::build_ssm(tensor_from(scores), theta));
      },
      py::arg("scores"), py::arg("theta"),
      "blocked pairs unless both max scores strictly exceed theta");
  m.def(
      "build_combined",
      [](const py::array_t<double>& centers, const py::array_t<double>& scores,
         const std::vector<bool>& valid, double tau, double theta) {
        fusion::MaskConfig cfg;
        cfg.tau = tau;
        cfg.theta = theta;
        return mask_array(fusion::build_combined(batch_of(centers, scores, valid), cfg));
      },
      py::arg("centers"), py::arg("scores"), py::arg("valid"), py::arg("tau") = 10.0,
      py::arg("theta") = 0.2, "union of the three gates with the diagonal forced open");
  m.def(
      "softmax_masked",
      [](const py::array_t<double>& logits, const py::array_t<double>& additive) {
        return array_from(nn::softmax_masked(tensor_from(logits), tensor_from(additive)));
      },
      py::arg("logits"), py::arg("additive_mask"));

  // ---- evaluation ----
  py::class_<heads::Detection>(m, "Detection")
      .def(py::init([](const BBox3D& box, double score, std::size_t class_id) {
             return heads::Detection{box, score, class_id};
           }),
           py::arg("box"), py::arg("score"), py::arg("class_id") = 0)
      .def_readonly("box", &heads::Detection::box)
      .def_readonly("score", &heads::Detection::score)
      .def_readonly("class_id", &heads::Detection::class_id);

  m.def("eval_ap", &sim::eval_ap, py::arg("detections"), py::arg("ground_truth"),
        py::arg("iou_threshold"), "all-point interpolated average precision");

  // ---- scenario / pipeline smoke surface ----
  py::class_<sim::Scenario>(m, "Scenario")
      .def_property_readonly("n_objects",
                             [](const sim::Scenario& s) { return s.objects.size(); })
      .def_property_readonly("n_agents", [](const sim::Scenario& s) { return s.agents.size(); })
      .def_readonly("seed", &sim::Scenario::seed)
      .def("object_boxes", [](const sim::Scenario& s) {
        std::vector<BBox3D> out;
        for (const auto& o : s.objects) out.push_back(o.box);
        return out;
      });

  m.def(
      "gen_scenario",
      [](std::uint64_t seed) { return sim::gen_scenario(seed, sim::ScenarioConfig{}); },
      py::arg("seed"), "deterministic multi-agent scene at the default desk scale");

  m.def(
      "run_pipeline",
      [](std::uint64_t seed, std::optional<std::filesystem::path> checkpoint, std::size_t k,
         double tau, double theta, std::size_t agents) {
        config::RunConfig c = config::default_config();
        c.dims.k = k;
        c.mask.tau = tau;
        c.mask.theta = theta;
        c.dims.max_agents = agents;
        c.sync();
        model::ModelParams params = [&] {
          if (checkpoint) return model::load_checkpoint(*checkpoint);
          Rng rng(mix_seed(seed, 0x90de1));
          return model::init_model(rng, c.dims);
        }();
        const auto scn = sim::gen_scenario(seed, c.scenario);
        const auto r = sim::run_pipeline(scn, params, c.pipeline_config(), seed);
        py::dict out;
        out["ap50"] = r.eval.ap50;
        out["ap70"] = r.eval.ap70;
        out["bandwidth_bits"] = r.eval.bandwidth_bits;
        out["n_detections"] = r.detections.size();
        return out;
      },
      py::arg("seed"), py::arg("checkpoint") = std::nullopt, py::arg("k") = 8,
      py::arg("tau") = 10.0, py::arg("theta") = 0.2, py::arg("agents") = 4,
      "full cooperative chain on one generated scene; random weights unless "
      "a checkpoint is given");
}
