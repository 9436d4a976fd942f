use proptest::prelude::*;
use twinlite::tensor::{self, BatchNormConfig, BnMode, ConvParams, RunningStats};
use twinlite::Tensor;

const TOL: f64 = 1e-12;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn close(got: &Tensor<f64>, want: &[f64]) -> bool {
    got.numel() == want.len() && got.data().iter().zip(want).all(|(a, b)| (a - b).abs() <= TOL)
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..64)
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    groups: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    params: ConvParams,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..=2, 1usize..=2, 1usize..=4, 1usize..=4, 1usize..=8, 1usize..=8, 1usize..=3, 1usize..=2, 0usize..=2, 1usize..=2)
        .prop_map(|(n, groups, ci, co, h, w, k, stride, padding, dilation)| ConvCase {
            n,
            groups,
            cin: ci * groups,
            cout: co * groups,
            h,
            w,
            k,
            params: ConvParams {
                stride,
                padding,
                dilation,
                groups,
            },
        })
        .prop_filter("kernel fits padded input", |c| {
            let span = c.params.dilation * (c.k - 1) + 1;
            c.h + 2 * c.params.padding >= span && c.w + 2 * c.params.padding >= span
        })
}

fn conv_oracle(c: &ConvCase, x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let p = c.params;
    let span = p.dilation * (c.k - 1) + 1;
    let oh = (c.h + 2 * p.padding - span) / p.stride + 1;
    let ow = (c.w + 2 * p.padding - span) / p.stride + 1;
    let (cin_g, cout_g) = (c.cin / c.groups, c.cout / c.groups);
    let (x, wt) = (x.data(), wt.data());
    let mut out = Vec::new();
    for n in 0..c.n {
        for o in 0..c.cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for ci in 0..cin_g {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (y * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix = (xo * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if (0..c.h as isize).contains(&iy) && (0..c.w as isize).contains(&ix) {
                                    let ch = (o / cout_g) * cin_g + ci;
                                    acc += x[((n * c.cin + ch) * c.h + iy as usize) * c.w + ix as usize]
                                        * wt[((o * cin_g + ci) * c.k + ky) * c.k + kx];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv2d_matches_nested_loops(c in conv_case(), v in values()) {
        let x = tensor(&[c.n, c.cin, c.h, c.w], &v);
        let wt = tensor(&[c.cout, c.cin / c.groups, c.k, c.k], &v[v.len() / 2..].iter().chain(&v).copied().collect::<Vec<_>>());
        let b = tensor(&[c.cout], &v.iter().rev().copied().collect::<Vec<_>>());
        let got = tensor::conv2d(&x, &wt, Some(&b), c.params).unwrap();
        prop_assert!(close(&got, &conv_oracle(&c, &x, &wt, &b)));
    }

    #[test]
    fn conv_transpose2d_matches_scatter_loops(
        n in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4, h in 1usize..=6, w in 1usize..=6,
        k in 1usize..=3, stride in 1usize..=3, v in values(),
    ) {
        let x = tensor(&[n, cin, h, w], &v);
        let wt = tensor(&[cin, cout, k, k], &v.iter().rev().copied().collect::<Vec<_>>());
        let got = tensor::conv_transpose2d(&x, &wt, None, stride).unwrap();
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        prop_assert_eq!(got.shape(), &[n, cout, oh, ow]);
        let mut want = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for xi in 0..w {
                        for o in 0..cout {
                            for ky in 0..k {
                                for kx in 0..k {
                                    want[((b * cout + o) * oh + y * stride + ky) * ow + xi * stride + kx] +=
                                        x.data()[((b * cin + c) * h + y) * w + xi] * wt.data()[((c * cout + o) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        prop_assert!(close(&got, &want));
    }

    #[test]
    fn avg_pool_matches_window_means(
        nc in 1usize..=6, h in 1usize..=8, w in 1usize..=8, k in 1usize..=3, stride in 1usize..=3, v in values(),
    ) {
        prop_assume!(k <= h && k <= w);
        let x = tensor(&[1, nc, h, w], &v);
        let got = tensor::avg_pool2d(&x, k, stride).unwrap();
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut want = Vec::new();
        for c in 0..nc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x.data()[(c * h + y * stride + dy) * w + xo * stride + dx];
                        }
                    }
                    want.push(s / (k * k) as f64);
                }
            }
        }
        prop_assert!(close(&got, &want));
    }

    #[test]
    fn bmm_matches_dot_products(b in 1usize..=4, m in 1usize..=8, k in 1usize..=8, p in 1usize..=8, v in values()) {
        let a = tensor(&[b, m, k], &v);
        let c = tensor(&[b, k, p], &v.iter().map(|x| x * 0.5 - 0.1).collect::<Vec<_>>());
        let got = tensor::bmm(&a, &c).unwrap();
        let mut want = Vec::new();
        for i in 0..b {
            for r in 0..m {
                for col in 0..p {
                    want.push((0..k).map(|j| a.data()[(i * m + r) * k + j] * c.data()[(i * k + j) * p + col]).sum());
                }
            }
        }
        prop_assert!(close(&got, &want));
    }

    #[test]
    fn softmax_channels_is_a_distribution(n in 1usize..=2, c in 2usize..=5, hw in 1usize..=6, v in values()) {
        let x = tensor(&[n, c, hw, 1], &v.iter().map(|x| 20.0 * x).collect::<Vec<_>>());
        let y = tensor::softmax_channels(&x).unwrap();
        for b in 0..n {
            for p in 0..hw {
                let s: f64 = (0..c).map(|k| y.data()[(b * c + k) * hw + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn training_batch_norm_standardizes(n in 2usize..=3, c in 1usize..=3, hw in 2usize..=5, v in values()) {
        let x = tensor(&[n, c, hw, hw], &v.iter().enumerate().map(|(i, x)| x + 0.01 * i as f64).collect::<Vec<_>>());
        let gamma = Tensor::ones(&[c]);
        let beta = Tensor::zeros(&[c]);
        let cfg = BatchNormConfig { eps: 1e-12, ..Default::default() };
        let mut stats = RunningStats::new(c);
        let y = tensor::batch_norm(&x, &gamma, &beta, &mut stats, cfg, BnMode::Training).unwrap();
        let plane = hw * hw;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| y.data()[(b * c + ch) * plane..][..plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-9);
        }
    }
}
