#include "advdistill/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "advdistill/errors.hpp"
#include "advdistill/losses.hpp"
#include "advdistill/nn.hpp"

namespace advdistill {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const ScalarFn& fn, std::vector<Tensor> inputs, double step) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tensor loss = fn(inputs);
    loss.backward();
    for (const auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
    }
  }
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double original = values[j];
      values[j] = original + step;
      const double plus = fn(inputs).item();
      values[j] = original - step;
      const double minus = fn(inputs).item();
      values[j] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i][j], numeric));
      ++result.values_checked;
    }
  }
  return result;
}

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(shape, std::move(v));
}

// Magnitudes in [0.1, 1] with random sign, away from kinks at zero.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, std::move(v));
}

Shape random_shape(Rng& rng, std::size_t max_rank = 3) {
  Shape s(pick(rng, 1, max_rank));
  for (auto& d : s) d = pick(rng, 1, 4);
  return s;
}

// Scalar readout sum(out * weights) with weights fixed per instance.
ScalarFn weighted(std::function<Tensor(const std::vector<Tensor>&)> op, const Shape& out_shape, Rng& rng) {
  Tensor w = uniform(out_shape, rng);
  return [op = std::move(op), w](const std::vector<Tensor>& in) { return sum(mul(op(in), w)); };
}

struct Instance {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

using Builder = std::function<Instance(Rng&)>;

std::vector<Builder> op_builders() {
  std::vector<Builder> b;
  b.push_back([](Rng& r) {
    std::size_t m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
    return Instance{"matmul", weighted([](auto& in) { return matmul(in[0], in[1]); }, {m, n}, r),
                    {uniform({m, k}, r), uniform({k, n}, r)}};
  });
  for (auto [name, op] : std::vector<std::pair<std::string, Tensor (*)(const Tensor&, const Tensor&)>>{
           {"add", add}, {"sub", sub}, {"mul", mul}}) {
    b.push_back([name, op](Rng& r) {
      Shape s = random_shape(r);
      return Instance{name, weighted([op](auto& in) { return op(in[0], in[1]); }, s, r), {uniform(s, r), uniform(s, r)}};
    });
  }
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), m = pick(r, 1, 4);
    return Instance{"add_row", weighted([](auto& in) { return add_row(in[0], in[1]); }, {n, m}, r),
                    {uniform({n, m}, r), uniform({m}, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s{pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3)};
    return Instance{"add_channel", weighted([](auto& in) { return add_channel(in[0], in[1]); }, s, r),
                    {uniform(s, r), uniform({s[1]}, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    double f = std::uniform_real_distribution<double>(-2.0, 2.0)(r);
    return Instance{"scale", weighted([f](auto& in) { return scale(in[0], f); }, s, r), {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"add_scalar", weighted([](auto& in) { return add_scalar(in[0], 0.7); }, s, r), {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"neg", weighted([](auto& in) { return neg(in[0]); }, s, r), {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"square", weighted([](auto& in) { return square(in[0]); }, s, r), {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"abs", weighted([](auto& in) { return abs(in[0]); }, s, r), {away_from_zero(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"sum", [](auto& in) { return scale(sum(in[0]), 1.3); }, {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"mean", [](auto& in) { return mean(square(in[0])); }, {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), m = pick(r, 1, 4);
    return Instance{"row_sum", weighted([](auto& in) { return row_sum(in[0]); }, {n, 1}, r), {uniform({n, m}, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t a = pick(r, 1, 4), c = pick(r, 1, 4);
    return Instance{"reshape", weighted([a, c](auto& in) { return reshape(in[0], {c, a}); }, {c, a}, r),
                    {uniform({a, c}, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s{pick(r, 1, 3), pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3)};
    return Instance{"flatten", weighted([](auto& in) { return flatten(in[0]); }, {s[0], s[1] * s[2] * s[3]}, r),
                    {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n1 = pick(r, 1, 3), n2 = pick(r, 1, 3), m = pick(r, 1, 4);
    return Instance{"concat_rows", weighted([](auto& in) { return concat_rows({in[0], in[1], in[0]}); }, {2 * n1 + n2, m}, r),
                    {uniform({n1, m}, r), uniform({n2, m}, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 2, 5), m = pick(r, 1, 4);
    std::size_t begin = pick(r, 0, n - 2), end = pick(r, begin + 1, n);
    return Instance{"slice_rows", weighted([begin, end](auto& in) { return slice_rows(in[0], begin, end); }, {end - begin, m}, r),
                    {uniform({n, m}, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"relu", weighted([](auto& in) { return relu(in[0]); }, s, r), {away_from_zero(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"sigmoid", weighted([](auto& in) { return sigmoid(in[0]); }, s, r), {uniform(s, r, -4.0, 4.0)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), c = pick(r, 2, 5);
    double t = std::uniform_real_distribution<double>(0.5, 3.0)(r);
    return Instance{"softmax", weighted([t](auto& in) { return softmax(in[0], t); }, {n, c}, r), {uniform({n, c}, r, -3, 3)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), c = pick(r, 2, 5);
    double t = std::uniform_real_distribution<double>(0.5, 3.0)(r);
    return Instance{"log_softmax", weighted([t](auto& in) { return log_softmax(in[0], t); }, {n, c}, r),
                    {uniform({n, c}, r, -3, 3)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    // Values sit at least 0.05 away from the clamp bounds.
    Tensor x = uniform(s, r, -1.0, 1.0);
    for (auto& v : x.mutable_data()) {
      if (std::fabs(std::fabs(v) - 0.5) < 0.05) v += 0.1;
    }
    return Instance{"clamp", weighted([](auto& in) { return clamp(in[0], -0.5, 0.5); }, s, r), {x}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    return Instance{"log", weighted([](auto& in) { return log(in[0]); }, s, r), {uniform(s, r, 0.2, 2.0)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 2), c = pick(r, 1, 2), f = pick(r, 1, 2), h = pick(r, 3, 5), w = pick(r, 3, 5);
    std::size_t k = pick(r, 1, 3), stride = pick(r, 1, 2), pad = pick(r, 0, 1);
    std::size_t oh = conv_output_size(h, k, stride, pad), ow = conv_output_size(w, k, stride, pad);
    return Instance{"conv2d",
                    weighted([stride, pad](auto& in) { return conv2d(in[0], in[1], stride, pad); }, {n, f, oh, ow}, r),
                    {uniform({n, c, h, w}, r), uniform({f, c, k, k}, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 2), c = pick(r, 1, 2), h = pick(r, 2, 6), w = pick(r, 2, 6);
    std::size_t k = pick(r, 1, std::min(h, w)), stride = pick(r, 1, 2);
    return Instance{"avg_pool2d",
                    weighted([k, stride](auto& in) { return avg_pool2d(in[0], k, stride); },
                             {n, c, conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)}, r),
                    {uniform({n, c, h, w}, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s{pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)};
    return Instance{"global_avg_pool", weighted([](auto& in) { return global_avg_pool(in[0]); }, {s[0], s[1]}, r),
                    {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    Shape s = random_shape(r);
    std::uint64_t seed = r();
    return Instance{"dropout",
                    weighted(
                        [seed](auto& in) {
                          Rng local(seed);
                          return dropout(in[0], 0.3, Mode::train, &local);
                        },
                        s, r),
                    {uniform(s, r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 5);
    return Instance{"adv_loss", [](auto& in) { return adv_loss(in[0], in[1]); },
                    {uniform({n, 1}, r, 0.1, 0.9), uniform({n, 1}, r, 0.1, 0.9)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 5);
    return Instance{"student_adv_loss", [](auto& in) { return student_adv_loss(in[0]); }, {uniform({n, 1}, r, 0.1, 0.9)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), c = pick(r, 2, 5);
    Tensor teacher = uniform({n, c}, r, -3, 3);
    return Instance{"data_loss", [teacher](auto& in) { return data_loss(teacher, in[0]); }, {uniform({n, c}, r, -3, 3)}};
  });
  b.push_back([](Rng& r) {
    double mu = std::uniform_real_distribution<double>(0.0, 1.0)(r);
    return Instance{"d_regularizer_l2",
                    [mu](auto& in) { return d_regularizer(RegularizerKind::l2, in, Tensor(), mu); },
                    {uniform(random_shape(r, 2), r), uniform(random_shape(r, 1), r)}};
  });
  b.push_back([](Rng& r) {
    double mu = std::uniform_real_distribution<double>(0.0, 1.0)(r);
    return Instance{"d_regularizer_l1",
                    [mu](auto& in) { return d_regularizer(RegularizerKind::l1, in, Tensor(), mu); },
                    {away_from_zero(random_shape(r, 2), r), away_from_zero(random_shape(r, 1), r)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 5);
    return Instance{"d_regularizer_adversarial_samples",
                    [](auto& in) { return d_regularizer(RegularizerKind::adversarial_samples, {}, in[0], 0.99); },
                    {uniform({n, 1}, r, 0.1, 0.9)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), c = pick(r, 2, 5);
    double t = std::uniform_real_distribution<double>(0.5, 5.0)(r);
    Tensor teacher = uniform({n, c}, r, -3, 3);
    return Instance{"kd_loss", [teacher, t](auto& in) { return kd_loss(teacher, in[0], t); }, {uniform({n, c}, r, -3, 3)}};
  });
  b.push_back([](Rng& r) {
    std::size_t n = pick(r, 1, 4), c = pick(r, 2, 5);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(pick(r, 0, c - 1));
    return Instance{"ce_loss", [labels](auto& in) { return ce_loss(in[0], labels); }, {uniform({n, c}, r, -3, 3)}};
  });
  return b;
}

NetworkSpec random_network(Rng& r) {
  NetworkSpec spec;
  const std::size_t classes = pick(r, 2, 4);
  if (pick(r, 0, 1) == 0) {
    spec.name = "random-mlp";
    std::size_t width = pick(r, 2, 5);
    spec.input_shape = {width};
    const std::size_t depth = pick(r, 1, 3);
    for (std::size_t i = 0; i < depth; ++i) {
      std::size_t next = pick(r, 2, 6);
      spec.layers.push_back(LayerSpec::dense(width, next));
      spec.layers.push_back(pick(r, 0, 1) ? LayerSpec::relu() : LayerSpec::sigmoid());
      if (pick(r, 0, 3) == 0) spec.layers.push_back(LayerSpec::dropout(0.3));
      width = next;
    }
    spec.feature_tap = spec.layers.size() - 1;
    spec.layers.push_back(LayerSpec::dense(width, classes));
  } else {
    spec.name = "random-cnn";
    std::size_t channels = pick(r, 1, 2), size = pick(r, 4, 6);
    spec.input_shape = {channels, size, size};
    const std::size_t convs = pick(r, 1, 2);
    for (std::size_t i = 0; i < convs; ++i) {
      std::size_t out = pick(r, 1, 3), k = pick(r, 2, 3), stride = pick(r, 1, 2), pad = pick(r, 0, 1);
      if (size + 2 * pad < k) k = size + 2 * pad;
      spec.layers.push_back(LayerSpec::conv(channels, out, k, stride, pad));
      spec.layers.push_back(pick(r, 0, 1) ? LayerSpec::relu() : LayerSpec::sigmoid());
      size = conv_output_size(size, k, stride, pad);
      channels = out;
    }
    std::size_t flat = channels;
    if (size >= 2 && pick(r, 0, 1)) {
      spec.layers.push_back(LayerSpec::avgpool(2, 1));
      spec.layers.push_back(LayerSpec::flatten());
      flat = channels * (size - 1) * (size - 1);
    } else {
      spec.layers.push_back(LayerSpec::avgpool());
    }
    spec.feature_tap = spec.layers.size() - 1;
    spec.layers.push_back(LayerSpec::dense(flat, classes));
  }
  return spec;
}

}  // namespace

GradCheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t op_instances, std::size_t networks) {
  Rng rng(seed);
  GradCheckReport report;
  auto record = [&](const std::string& name, const GradCheckResult& res) {
    report.values_checked += res.values_checked;
    if (report.worst_case.empty() || res.max_rel_error > report.max_rel_error) {
      report.max_rel_error = res.max_rel_error;
      report.worst_case = name;
    }
  };

  const auto builders = op_builders();
  for (std::size_t i = 0; i < op_instances; ++i) {
    Instance inst = builders[i % builders.size()](rng);
    record(inst.name, check_gradients(inst.fn, inst.inputs));
    ++report.op_instances;
  }

  for (std::size_t i = 0; i < networks; ++i) {
    const NetworkSpec spec = random_network(rng);
    Network net = build(spec, rng);
    // Random biases too: zero biases put dead-layer outputs exactly on the relu kink.
    for (auto& p : net.parameters()) {
      Tensor fresh = uniform(p.shape(), rng);
      std::copy(fresh.data().begin(), fresh.data().end(), p.mutable_data().begin());
    }
    const std::size_t batch = pick(rng, 1, 3);
    Shape x_shape{batch};
    x_shape.insert(x_shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    std::vector<int> labels(batch);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, spec.num_classes() - 1));
    const std::uint64_t dropout_seed = rng();
    std::vector<Tensor> inputs = net.parameters();
    inputs.push_back(uniform(x_shape, rng));
    ScalarFn fn = [spec, labels, dropout_seed](const std::vector<Tensor>& in) {
      Network local(spec, std::vector<Tensor>(in.begin(), in.end() - 1));
      Rng noise(dropout_seed);
      return ce_loss(local.forward(in.back(), Mode::train, &noise).logits, labels);
    };
    record(spec.name + " " + serialize_spec(spec), check_gradients(fn, inputs));
    ++report.networks;
  }
  return report;
}

}  // namespace advdistill
