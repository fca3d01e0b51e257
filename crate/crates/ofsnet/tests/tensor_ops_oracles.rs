//! Fixed-size operations against independent oracles: naive nested-loop
//! convolution/pooling references and central finite differences.

use ofsnet::ops::{
    avg_pool, avg_pool_backward, conv2d_same, conv2d_same_backward, linear, linear_backward, relu,
    relu_backward,
};
use ofsnet::rng::Stream;
use ofsnet::tensor::{FilterBank, Tensor};

fn random_tensor(shape: Vec<usize>, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    }
}

fn random_bank(cout: usize, cin: usize, s: usize, rng: &mut Stream) -> FilterBank {
    FilterBank::new(cout, cin, s, random_tensor(vec![cout, cin, s, s], rng)).unwrap()
}

/// Reference convolution: six nested loops, gather style, zero padding.
fn naive_conv2d_same(input: &Tensor, filters: &FilterBank, bias: &[f64]) -> Tensor {
    let (b, cin, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (cout, s) = (filters.out_channels, filters.size);
    let r = (s - 1) / 2;
    let mut out = Tensor::zeros(vec![b, cout, h, w]);
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for dy in 0..s {
                            for dx in 0..s {
                                let iy = y as isize + dy as isize - r as isize;
                                let ix = x as isize + dx as isize - r as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += filters.weights.data[filters.at(co, ci, dy, dx)]
                                        * input.data[input.at4(bi, ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    out.data[((bi * cout + co) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Reference pooling: plain window means.
fn naive_avg_pool(input: &Tensor, window: usize, stride: usize) -> Tensor {
    let (b, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..window {
                        for kx in 0..window {
                            acc += input.data
                                [input.at4(bi, ci, oy * stride + ky, ox * stride + kx)];
                        }
                    }
                    out.data[((bi * c + ci) * oh + oy) * ow + ox] =
                        acc / (window * window) as f64;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = Stream::new(401);
    let input = random_tensor(vec![2, 3, 7, 7], &mut rng);
    let bank = random_bank(4, 3, 5, &mut rng);
    let bias: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let fast = conv2d_same(&input, &bank, &bias).unwrap();
    let slow = naive_conv2d_same(&input, &bank, &bias);
    assert_eq!(fast.shape, slow.shape);
    for (a, b) in fast.data.iter().zip(&slow.data) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv_matches_naive_oracle_across_sizes() {
    let mut rng = Stream::new(402);
    for s in [1, 3, 5, 7] {
        let input = random_tensor(vec![1, 2, 9, 6], &mut rng);
        let bank = random_bank(3, 2, s, &mut rng);
        let bias: Vec<f64> = (0..3).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
        let fast = conv2d_same(&input, &bank, &bias).unwrap();
        let slow = naive_conv2d_same(&input, &bank, &bias);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() <= 1e-12, "size {s}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_is_linear_in_input_and_weights() {
    let mut rng = Stream::new(403);
    for _ in 0..10 {
        let x1 = random_tensor(vec![1, 2, 6, 5], &mut rng);
        let x2 = random_tensor(vec![1, 2, 6, 5], &mut rng);
        let bank = random_bank(2, 2, 3, &mut rng);
        let zero_bias = vec![0.0; 2];
        let (a, b) = (rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0));

        let mixed = Tensor {
            shape: x1.shape.clone(),
            data: x1
                .data
                .iter()
                .zip(&x2.data)
                .map(|(&u, &v)| a * u + b * v)
                .collect(),
        };
        let lhs = conv2d_same(&mixed, &bank, &zero_bias).unwrap();
        let y1 = conv2d_same(&x1, &bank, &zero_bias).unwrap();
        let y2 = conv2d_same(&x2, &bank, &zero_bias).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * y1.data[i] + b * y2.data[i];
            assert!((lhs.data[i] - rhs).abs() <= 1e-10);
        }

        // Linearity in the weights with the same mixing coefficients.
        let bank2 = random_bank(2, 2, 3, &mut rng);
        let mixed_bank = FilterBank::new(
            2,
            2,
            3,
            Tensor {
                shape: bank.weights.shape.clone(),
                data: bank
                    .weights
                    .data
                    .iter()
                    .zip(&bank2.weights.data)
                    .map(|(&u, &v)| a * u + b * v)
                    .collect(),
            },
        )
        .unwrap();
        let lhs = conv2d_same(&x1, &mixed_bank, &zero_bias).unwrap();
        let w1 = conv2d_same(&x1, &bank, &zero_bias).unwrap();
        let w2 = conv2d_same(&x1, &bank2, &zero_bias).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * w1.data[i] + b * w2.data[i];
            assert!((lhs.data[i] - rhs).abs() <= 1e-10);
        }
    }
}

#[test]
fn pool_matches_naive_oracle() {
    let mut rng = Stream::new(404);
    for (win, stride) in [(3, 3), (2, 2), (3, 1), (2, 3)] {
        let input = random_tensor(vec![2, 2, 8, 7], &mut rng);
        let fast = avg_pool(&input, win, stride).unwrap();
        let slow = naive_avg_pool(&input, win, stride);
        assert_eq!(fast.shape, slow.shape);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Loss used to scalarize backward checks: sum of output times a fixed
/// random projection, so the upstream gradient is the projection itself.
fn project(out: &Tensor, proj: &Tensor) -> f64 {
    out.data.iter().zip(&proj.data).map(|(&a, &b)| a * b).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = Stream::new(405);
    let input = random_tensor(vec![2, 2, 6, 6], &mut rng);
    let bank = random_bank(3, 2, 3, &mut rng);
    let bias: Vec<f64> = (0..3).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let proj = random_tensor(vec![2, 3, 6, 6], &mut rng);

    let (gin, gw, gb) = conv2d_same_backward(&input, &bank, &proj, true).unwrap();
    let gin = gin.unwrap();
    let h = 1e-5;

    // >= 100 input coordinates.
    let mut coords: Vec<usize> = (0..input.numel()).collect();
    rng.shuffle(&mut coords);
    for &i in coords.iter().take(100) {
        let mut plus = input.clone();
        plus.data[i] += h;
        let mut minus = input.clone();
        minus.data[i] -= h;
        let fd = (project(&conv2d_same(&plus, &bank, &bias).unwrap(), &proj)
            - project(&conv2d_same(&minus, &bank, &bias).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gin.data[i], fd) <= 1e-5, "input[{i}]: {} vs {fd}", gin.data[i]);
    }

    // Every weight coordinate.
    for i in 0..bank.weights.numel() {
        let mut plus = bank.clone();
        plus.weights.data[i] += h;
        let mut minus = bank.clone();
        minus.weights.data[i] -= h;
        let fd = (project(&conv2d_same(&input, &plus, &bias).unwrap(), &proj)
            - project(&conv2d_same(&input, &minus, &bias).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gw.data[i], fd) <= 1e-5, "weight[{i}]: {} vs {fd}", gw.data[i]);
    }

    // Every bias channel.
    for c in 0..3 {
        let mut plus = bias.clone();
        plus[c] += h;
        let mut minus = bias.clone();
        minus[c] -= h;
        let fd = (project(&conv2d_same(&input, &bank, &plus).unwrap(), &proj)
            - project(&conv2d_same(&input, &bank, &minus).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gb[c], fd) <= 1e-5, "bias[{c}]: {} vs {fd}", gb[c]);
    }
}

#[test]
fn pool_backward_matches_finite_differences() {
    let mut rng = Stream::new(406);
    let input = random_tensor(vec![1, 2, 7, 7], &mut rng);
    let out = avg_pool(&input, 3, 3).unwrap();
    let proj = random_tensor(out.shape.clone(), &mut rng);
    let gin = avg_pool_backward(&input.shape, 3, 3, &proj).unwrap();
    let h = 1e-5;
    for i in (0..input.numel()).step_by(3) {
        let mut plus = input.clone();
        plus.data[i] += h;
        let mut minus = input.clone();
        minus.data[i] -= h;
        let fd = (project(&avg_pool(&plus, 3, 3).unwrap(), &proj)
            - project(&avg_pool(&minus, 3, 3).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gin.data[i], fd) <= 1e-5);
    }
}

#[test]
fn relu_backward_matches_finite_differences_away_from_kink() {
    let mut rng = Stream::new(407);
    let input = random_tensor(vec![4, 25], &mut rng);
    let proj = random_tensor(vec![4, 25], &mut rng);
    let gin = relu_backward(&input, &proj);
    let h = 1e-6;
    for i in 0..input.numel() {
        if input.data[i].abs() <= 1e-3 {
            continue;
        }
        let mut plus = input.clone();
        plus.data[i] += h;
        let mut minus = input.clone();
        minus.data[i] -= h;
        let fd = (project(&relu(&plus), &proj) - project(&relu(&minus), &proj)) / (2.0 * h);
        assert!(rel_err(gin.data[i], fd) <= 1e-6, "x[{i}]={}", input.data[i]);
    }
}

#[test]
fn linear_backward_matches_finite_differences() {
    let mut rng = Stream::new(408);
    let input = random_tensor(vec![3, 7], &mut rng);
    let weights = random_tensor(vec![4, 7], &mut rng);
    let bias: Vec<f64> = (0..4).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let proj = random_tensor(vec![3, 4], &mut rng);
    let (gin, gw, gb) = linear_backward(&input, &weights, &proj).unwrap();
    let h = 1e-6;

    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data[i] += h;
        let mut minus = input.clone();
        minus.data[i] -= h;
        let fd = (project(&linear(&plus, &weights, &bias).unwrap(), &proj)
            - project(&linear(&minus, &weights, &bias).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gin.data[i], fd) <= 1e-6);
    }
    for i in 0..weights.numel() {
        let mut plus = weights.clone();
        plus.data[i] += h;
        let mut minus = weights.clone();
        minus.data[i] -= h;
        let fd = (project(&linear(&input, &plus, &bias).unwrap(), &proj)
            - project(&linear(&input, &minus, &bias).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gw.data[i], fd) <= 1e-6);
    }
    for c in 0..4 {
        let mut plus = bias.clone();
        plus[c] += h;
        let mut minus = bias.clone();
        minus[c] -= h;
        let fd = (project(&linear(&input, &weights, &plus).unwrap(), &proj)
            - project(&linear(&input, &weights, &minus).unwrap(), &proj))
            / (2.0 * h);
        assert!(rel_err(gb[c], fd) <= 1e-6);
    }
}
