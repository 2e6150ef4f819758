use super::{contract_err, dim_err, Result, Tensor};

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    /// Input coordinate for output `(y, x)` and kernel tap `(ky, kx)`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (y + ky).checked_sub(self.pad)?;
        let ix = (x + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

impl Tensor {
    /// 2-D cross-correlation of a `C x H x W` input with an `O x C x K x K`
    /// kernel, stride 1 and symmetric zero padding.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err("conv2d", format!("input must be C x H x W, got {s:?}"))),
        };
        let (o, wc, k) = match weight.shape() {
            [o, wc, k1, k2] if k1 == k2 => (*o, *wc, *k1),
            s => return Err(dim_err("conv2d", format!("weight must be O x C x K x K, got {s:?}"))),
        };
        if wc != c {
            return Err(dim_err(
                "conv2d",
                format!("input {:?} has {c} channels but weight {:?} expects {wc}", self.shape(), weight.shape()),
            ));
        }
        if k % 2 == 0 {
            return Err(contract_err("conv2d", format!("kernel size {k} must be odd")));
        }
        if bias.shape() != [o] {
            return Err(dim_err("conv2d", format!("bias {:?} for {o} output channels", bias.shape())));
        }
        let (oh, ow) = ((h + 2 * padding).checked_sub(k - 1), (w + 2 * padding).checked_sub(k - 1));
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => return Err(dim_err("conv2d", format!("kernel {k} with padding {padding} exceeds {h} x {w}"))),
        };
        let g = Geom { c, h, w, o, k, pad: padding, oh, ow };

        let (x, wt, b) = (self.data(), weight.data(), bias.data());
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            for xx in 0..ow {
                                if let Some((iy, ix)) = g.src(y, xx, ky, kx) {
                                    plane[y * ow + xx] += wv * x[(ic * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(Tensor::from_op(
            out,
            vec![o, oh, ow],
            "conv2d",
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |grad, p| {
                let Geom { c, h, w, o, k, oh, ow, .. } = g;
                let (x, wt) = (p[0].data(), p[1].data());
                let mut gx = p[0].is_tracked().then(|| vec![0.0; c * h * w]);
                let mut gw = p[1].is_tracked().then(|| vec![0.0; o * c * k * k]);
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    let gp = &grad[oc * oh * ow..(oc + 1) * oh * ow];
                    gb[oc] = gp.iter().sum();
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((oc * c + ic) * k + ky) * k + kx;
                                let wv = wt[widx];
                                let mut acc = 0.0;
                                for y in 0..oh {
                                    for xx in 0..ow {
                                        if let Some((iy, ix)) = g.src(y, xx, ky, kx) {
                                            let gv = gp[y * ow + xx];
                                            let xi = (ic * h + iy) * w + ix;
                                            acc += gv * x[xi];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xi] += gv * wv;
                                            }
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, Some(gb)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_passthrough() {
        let input = Tensor::new((0..18).map(|v| v as f64 * 0.5).collect(), &[2, 3, 3]).unwrap();
        let weight = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let bias = Tensor::zeros(&[2]).unwrap();
        let out = input.conv2d(&weight, &bias, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_input_gives_bias_planes() {
        let input = Tensor::zeros(&[3, 4, 4]).unwrap();
        let weight = Tensor::new((0..54).map(|v| v as f64).collect(), &[2, 3, 3, 3]).unwrap();
        let bias = Tensor::new(vec![0.25, -1.5], &[2]).unwrap();
        let out = input.conv2d(&weight, &bias, 1).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        assert!(out.data()[..16].iter().all(|&v| v == 0.25));
        assert!(out.data()[16..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn output_shape_law() {
        for h in 1..7 {
            for w in 1..7 {
                for k in [1, 3, 5] {
                    for pad in 0..3 {
                        let input = Tensor::zeros(&[1, h, w]).unwrap();
                        let weight = Tensor::zeros(&[2, 1, k, k]).unwrap();
                        let bias = Tensor::zeros(&[2]).unwrap();
                        let res = input.conv2d(&weight, &bias, pad);
                        let oh = (h + 2 * pad) as isize - k as isize + 1;
                        let ow = (w + 2 * pad) as isize - k as isize + 1;
                        if oh >= 1 && ow >= 1 {
                            assert_eq!(res.unwrap().shape(), &[2, oh as usize, ow as usize]);
                        } else {
                            assert!(res.is_err());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[3, 4, 4]).unwrap();
        let weight = Tensor::zeros(&[2, 4, 1, 1]).unwrap();
        let err = input.conv2d(&weight, &Tensor::zeros(&[2]).unwrap(), 0).unwrap_err().to_string();
        assert!(err.contains("[3, 4, 4]") && err.contains("[2, 4, 1, 1]"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        let input = Tensor::zeros(&[1, 4, 4]).unwrap();
        let weight = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(input.conv2d(&weight, &Tensor::zeros(&[1]).unwrap(), 0).is_err());
    }
}
