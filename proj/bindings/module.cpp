// Python bindings: numpy in/out wrappers over the core operations plus a
// small Model class for end-to-end use.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>

#include "spikegrad/checkpoint.hpp"
#include "spikegrad/common.hpp"
#include "spikegrad/data.hpp"
#include "spikegrad/losses.hpp"
#include "spikegrad/network.hpp"
#include "spikegrad/neuron.hpp"
#include "spikegrad/normalization.hpp"
#include "spikegrad/trainer.hpp"
#include "spikegrad/tuner.hpp"

namespace py = pybind11;
using namespace spikegrad;

namespace {

ResetMode reset_from_string(const std::string& s) {
  if (s == "hard") return ResetMode::Hard;
  if (s == "soft") return ResetMode::Soft;
  throw ContractError("reset must be 'soft' or 'hard', got '" + s + "'");
}

Shape shape_of(const py::array& a, std::size_t skip_leading = 0) {
  Shape s;
  for (py::ssize_t d = static_cast<py::ssize_t>(skip_leading); d < a.ndim(); ++d)
    s.push_back(static_cast<std::size_t>(a.shape(d)));
  return s;
}

Tensor<float> tensor_from_array(
    const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape s = shape_of(a);
  std::vector<float> v(a.data(), a.data() + a.size());
  return Tensor<float>::from_data(std::move(s), std::move(v));
}

py::array_t<float> array_from_tensor(const Tensor<float>& t) {
  std::vector<py::ssize_t> dims;
  for (std::size_t d : t.shape()) dims.push_back(static_cast<py::ssize_t>(d));
  if (dims.empty()) dims.push_back(1);
  py::array_t<float> out(dims);
  std::memcpy(out.mutable_data(), t.data().data(), t.numel() * sizeof(float));
  return out;
}

Dataset dataset_from_arrays(
    const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
    const py::array_t<int, py::array::c_style | py::array::forcecast>& labels,
    std::size_t num_classes) {
  if (images.ndim() < 2) throw ContractError("images must be [N, ...]");
  if (labels.ndim() != 1 || labels.shape(0) != images.shape(0))
    throw ContractError("labels must be [N] matching images");
  Dataset d;
  d.sample_shape = shape_of(images, 1);
  d.values.assign(images.data(), images.data() + images.size());
  d.labels.assign(labels.data(), labels.data() + labels.size());
  int max_label = 0;
  for (int y : d.labels) max_label = std::max(max_label, y);
  d.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label) + 1;
  return d;
}

// NetworkSpec + parameters behind a numpy-facing API.
class Model {
 public:
  Model(const std::string& arch, const std::vector<std::size_t>& input_shape,
        std::size_t num_classes, const std::string& reset, bool batchnorm, double gamma)
      : net_(make_architecture(arch, Shape(input_shape.begin(), input_shape.end()), num_classes,
                               reset_from_string(reset), batchnorm, gamma)) {}

  explicit Model(Network net) : net_(std::move(net)) {}

  void init_params(std::uint64_t seed) { net_.init_params(seed); }
  void set_gamma(double g) { net_.set_gamma(g); }
  double gamma() const { return net_.gamma(); }

  std::vector<double> thresholds() const {
    std::vector<double> t;
    for (std::size_t i = 0; i < net_.spiking_count(); ++i)
      t.push_back(net_.neuron_config(i).threshold);
    return t;
  }

  py::array_t<float> forward(
      const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
      std::size_t timesteps) {
    net_.set_training(false);
    return array_from_tensor(net_.forward(tensor_from_array(images), timesteps).logits);
  }

  std::vector<double> firing_rates(
      const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
      std::size_t timesteps) {
    net_.set_training(false);
    ForwardOutput out = net_.forward(tensor_from_array(images), timesteps);
    std::vector<double> rates;
    for (std::size_t i = 0; i < out.trace.size(); ++i) rates.push_back(firing_rate(out, i));
    return rates;
  }

  std::vector<py::dict> fit(
      const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
      const py::array_t<int, py::array::c_style | py::array::forcecast>& labels,
      std::size_t epochs, std::size_t batch_size, std::size_t timesteps, double max_lr,
      double weight_decay, std::uint64_t seed, double val_fraction) {
    Dataset d = dataset_from_arrays(images, labels, net_.spec().num_classes);
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.timesteps = timesteps;
    cfg.max_lr = max_lr;
    cfg.weight_decay = weight_decay;
    cfg.seed = seed;
    cfg.val_fraction = val_fraction;
    TrainResult res = train(net_, d, nullptr, cfg);
    last_timesteps_ = timesteps;
    last_seed_ = seed;
    last_epochs_ = epochs;
    std::vector<py::dict> rows;
    for (const auto& m : res.history) {
      py::dict row;
      row["epoch"] = m.epoch;
      row["train_loss"] = m.train_loss;
      row["val_loss"] = m.val_loss;
      row["train_acc"] = m.train_acc;
      row["val_acc"] = m.val_acc;
      row["lr"] = m.lr;
      rows.push_back(std::move(row));
    }
    return rows;
  }

  double evaluate_on(const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
                     const py::array_t<int, py::array::c_style | py::array::forcecast>& labels,
                     std::size_t timesteps) {
    Dataset d = dataset_from_arrays(images, labels, net_.spec().num_classes);
    return evaluate(net_, d, timesteps);
  }

  std::vector<double> normalize(
      const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
      const py::array_t<int, py::array::c_style | py::array::forcecast>& labels,
      std::size_t timesteps) {
    Dataset d = dataset_from_arrays(images, labels, net_.spec().num_classes);
    return normalize_thresholds(net_, d, timesteps);
  }

  void save(const std::string& path) {
    save_checkpoint(path, make_checkpoint(net_, last_seed_, last_timesteps_, last_epochs_));
  }

  static Model load(const std::string& path) {
    return Model(network_from_checkpoint(load_checkpoint(path)));
  }

 private:
  Network net_;
  std::size_t last_timesteps_ = 10;
  std::uint64_t last_seed_ = 0;
  std::size_t last_epochs_ = 0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Surrogate-gradient training engine for deep spiking networks";
  m.attr("__version__") = "1.0.0";
  configure_threads();

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<ContractError>(m, "ContractError");
  py::register_exception<FormatError>(m, "FormatError");
  py::register_exception<TrainingError>(m, "TrainingError");

  m.def(
      "surrogate",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& u, double threshold,
         double beta, double gamma) {
        NeuronConfig cfg{threshold, ResetMode::Soft, beta, gamma};
        cfg.validate();
        py::array_t<double> out(std::vector<py::ssize_t>(u.shape(), u.shape() + u.ndim()));
        const double* src = u.data();
        double* dst = out.mutable_data();
        for (py::ssize_t i = 0; i < u.size(); ++i) dst[i] = surrogate_value(src[i], cfg);
        return out;
      },
      py::arg("u"), py::arg("threshold") = 1.0, py::arg("beta") = 1.0, py::arg("gamma") = 100.0,
      "Surrogate derivative beta * (1 + |gamma*(u - threshold)|)^-2, elementwise.");

  m.def(
      "simulate_if",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& currents,
         double threshold, const std::string& reset) {
        if (currents.ndim() != 1) throw ContractError("currents must be a 1-D time series");
        NeuronConfig cfg{threshold, reset_from_string(reset), 1.0, 100.0};
        const std::size_t steps = static_cast<std::size_t>(currents.shape(0));
        auto x = Tensor<float>::from_data(
            {steps, 1}, std::vector<float>(currents.data(), currents.data() + steps));
        SpikingLayerResult<float> r = spiking_layer(x, steps, cfg);
        return py::make_tuple(array_from_tensor(r.spikes), array_from_tensor(r.u_pre));
      },
      py::arg("currents"), py::arg("threshold") = 1.0, py::arg("reset") = "soft",
      "Single integrate-and-fire neuron driven by a current time series; returns "
      "(spikes, pre-reset potentials).");

  m.def(
      "load_idx",
      [](const std::string& images_path, const std::string& labels_path) {
        Dataset d = load_idx(images_path, labels_path);
        std::vector<py::ssize_t> dims = {static_cast<py::ssize_t>(d.count())};
        for (std::size_t s : d.sample_shape) dims.push_back(static_cast<py::ssize_t>(s));
        py::array_t<float> images(dims);
        std::memcpy(images.mutable_data(), d.values.data(), d.values.size() * sizeof(float));
        py::array_t<int> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.count())});
        std::memcpy(labels.mutable_data(), d.labels.data(), d.labels.size() * sizeof(int));
        return py::make_tuple(images, labels);
      },
      py::arg("images_path"), py::arg("labels_path"),
      "Parse an IDX image/label pair; pixels scaled by 1/255.");

  m.def(
      "fsq_mean",
      [](double gamma, double beta, double threshold,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& samples) {
        return fsq_mean(
            gamma, beta, threshold,
            std::span<const double>(samples.data(), static_cast<std::size_t>(samples.size())));
      },
      py::arg("gamma"), py::arg("beta"), py::arg("threshold"), py::arg("samples"),
      "Monte-Carlo estimate of <f(u)^2> over potential samples.");

  m.def(
      "tune_gamma",
      [](const std::string& arch,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
         const py::array_t<int, py::array::c_style | py::array::forcecast>& labels,
         double gamma_lo, double gamma_hi, std::size_t timesteps, std::uint64_t seed,
         std::size_t profile_batches, std::size_t batch_size, double tol, std::size_t max_iter,
         const std::string& reset, bool batchnorm) {
        Dataset d = dataset_from_arrays(images, labels, 0);
        NetworkSpec spec = make_architecture(arch, d.sample_shape, d.num_classes,
                                             reset_from_string(reset), batchnorm, gamma_hi);
        auto batches = make_profile_batches(d, profile_batches, batch_size, seed);
        TuneResult r =
            tune_gamma(spec, batches, gamma_lo, gamma_hi, seed, timesteps, tol, max_iter);
        py::dict out;
        out["gamma"] = r.gamma;
        out["iterations"] = r.iterations;
        out["balance_ratio"] = r.final_ratio;
        out["converged"] = r.converged;
        out["monotone"] = r.monotone;
        out["history"] = r.history;
        return out;
      },
      py::arg("arch"), py::arg("images"), py::arg("labels"), py::arg("gamma_lo") = 1.0,
      py::arg("gamma_hi") = 100.0, py::arg("timesteps") = 10, py::arg("seed") = 1,
      py::arg("profile_batches") = 8, py::arg("batch_size") = 32, py::arg("tol") = 0.5,
      py::arg("max_iter") = 20, py::arg("reset") = "soft", py::arg("batchnorm") = false,
      "Bisection search on log(gamma) for a balanced gradient profile.");

  m.def(
      "profile_gradients",
      [](const std::string& arch,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
         const py::array_t<int, py::array::c_style | py::array::forcecast>& labels, double gamma,
         std::size_t timesteps, std::uint64_t seed, std::size_t profile_batches,
         std::size_t batch_size, const std::string& reset, bool batchnorm) {
        Dataset d = dataset_from_arrays(images, labels, 0);
        NetworkSpec spec = make_architecture(arch, d.sample_shape, d.num_classes,
                                             reset_from_string(reset), batchnorm, gamma);
        auto batches = make_profile_batches(d, profile_batches, batch_size, seed);
        GradientProfile p = profile_gradients(spec, batches, gamma, seed, timesteps);
        std::vector<py::dict> rows;
        for (const auto& e : p.entries) {
          py::dict row;
          row["layer_index"] = e.layer_index;
          row["layer_name"] = e.layer_name;
          row["mean_abs_grad"] = e.mean_abs_grad;
          row["grad_variance"] = e.grad_variance;
          rows.push_back(std::move(row));
        }
        return py::make_tuple(rows, balance_ratio(p));
      },
      py::arg("arch"), py::arg("images"), py::arg("labels"), py::arg("gamma"),
      py::arg("timesteps") = 10, py::arg("seed") = 1, py::arg("profile_batches") = 8,
      py::arg("batch_size") = 32, py::arg("reset") = "soft", py::arg("batchnorm") = false,
      "Per-layer |d loss / d spikes| statistics at initialization and the balance ratio.");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, const std::vector<std::size_t>&, std::size_t,
                    const std::string&, bool, double>(),
           py::arg("arch"), py::arg("input_shape"), py::arg("num_classes"),
           py::arg("reset") = "soft", py::arg("batchnorm") = false, py::arg("gamma") = 100.0)
      .def("init_params", &Model::init_params, py::arg("seed"))
      .def("set_gamma", &Model::set_gamma, py::arg("gamma"))
      .def_property_readonly("gamma", &Model::gamma)
      .def_property_readonly("thresholds", &Model::thresholds)
      .def("forward", &Model::forward, py::arg("images"), py::arg("timesteps") = 10)
      .def("firing_rates", &Model::firing_rates, py::arg("images"), py::arg("timesteps") = 10)
      .def("fit", &Model::fit, py::arg("images"), py::arg("labels"), py::arg("epochs") = 1,
           py::arg("batch_size") = 64, py::arg("timesteps") = 10, py::arg("max_lr") = 1e-3,
           py::arg("weight_decay") = 0.01, py::arg("seed") = 1, py::arg("val_fraction") = 0.1)
      .def("evaluate", &Model::evaluate_on, py::arg("images"), py::arg("labels"),
           py::arg("timesteps") = 10)
      .def("normalize_thresholds", &Model::normalize, py::arg("images"), py::arg("labels"),
           py::arg("timesteps") = 10)
      .def("save", &Model::save, py::arg("path"))
      .def_static("load", &Model::load, py::arg("path"));

  m.def("architectures", &architecture_names, "Built-in architecture names.");
}
