use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, op)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + offset)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums each `[H,W]` plane of an `[N,C,H,W]` tensor into `[N,C]`.
    pub fn sum_spatial(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4("sum_spatial")?;
        let data = t.data().chunks(h * w).map(|p| p.iter().sum()).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::SumSpatial(a)))
    }

    /// Sums a `[N, C]` tensor over its first axis, giving `[C]`.
    pub fn sum_batch(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c) = match *t.shape() {
            [n, c] => (n, c),
            _ => return Err(Error::shape("sum_batch", format!("expected [N, C], got {:?}", t.shape()))),
        };
        let mut data = vec![0.0; c];
        for row in t.data().chunks(c.max(1)).take(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c], data), Op::SumBatch(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence reaches the loss
        self.map(a, Op::Relu(a), |x| if x <= 0.0 { 0.0 } else { x })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax across the channel axis at every `(n, y, x)` location.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4("softmax_channels")?;
        let x = t.data();
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; c];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let max = (0..c).map(|k| x[base + k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (k, e) in buf.iter_mut().enumerate() {
                    *e = (x[base + k * plane + p] - max).exp();
                    total += *e;
                }
                for (k, e) in buf.iter().enumerate() {
                    out[base + k * plane + p] = e / total;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::SoftmaxChannels(a)))
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// element in row-major window order.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("spatial extent {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2 { input: a, argmax }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4("upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = t.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                let src = &x[nc * h * w + (y / 2) * w..][..w];
                let dst = &mut out[nc * oh * ow + y * ow..][..ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::Upsample2(a)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("non-channel extents differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let plane = h * w;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity((ca + cb) * plane * n);
        for bi in 0..n {
            out.extend_from_slice(&x[bi * ca * plane..][..ca * plane]);
            out.extend_from_slice(&y[bi * cb * plane..][..cb * plane]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(value, Op::ConcatChannels(a, b)))
    }

    /// Channels `start..end` of an `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_channels", format!("range {start}..{end} of {c} channels")));
        }
        let plane = h * w;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for bi in 0..n {
            out.extend_from_slice(&x[(bi * c + start) * plane..(bi * c + end) * plane]);
        }
        let value = Tensor::from_parts(vec![n, end - start, h, w], out);
        Ok(self.push(value, Op::SliceChannels { input: a, start }))
    }

    /// Reduces each channel map to its maximum: `[N,C,H,W] -> [N,C]`.
    pub fn global_max_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4("global_max_pool")?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (j, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = j;
                }
            }
            out.push(chunk[best]);
            argmax.push(i * plane + best);
        }
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(value, Op::GlobalMaxPool { input: a, argmax }))
    }

    /// Fully connected layer: `[N,F] x [O,F]^T + [O] -> [N,O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let (&[n, f], &[o, wf]) = (xs, ws) else {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        };
        if f != wf || self.value(bias).len() != o {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(bias)),
            ));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        super::gemm::gemm(
            n,
            f,
            o,
            1.0,
            self.value(input).data(),
            (f, 1),
            self.value(weight).data(),
            (1, f),
            1.0,
            &mut out,
            (o, 1),
        );
        Ok(self.push(
            Tensor::from_parts(vec![n, o], out),
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
