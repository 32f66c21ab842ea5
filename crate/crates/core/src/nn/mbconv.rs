//! Mobile inverted bottleneck with squeeze-and-excitation.

use rand::Rng;

use super::layers::{global_avg_pool, global_avg_pool_backward, Activation, BatchNorm, Conv2d, LayerCache, Padding};
use super::{Buffer, Mode, Param, Tensor};
use crate::par;

#[derive(Clone, Debug)]
pub struct MbConvSpec {
    /// Layer-name prefix, e.g. `block2a_`.
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expand_ratio: usize,
    pub se_ratio: f32,
    /// Spatial size of the block input; picks the stride-2 padding.
    pub input_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct MbConv {
    pub expand: Option<(Conv2d, BatchNorm)>,
    pub dwconv: Conv2d,
    pub bn: BatchNorm,
    pub se_reduce: Conv2d,
    pub se_expand: Conv2d,
    pub project: Conv2d,
    pub project_bn: BatchNorm,
    pub skip: bool,
}

pub struct MbConvCache {
    x: Tensor,
    expand: Option<(LayerCache, Tensor)>,
    dw_in: Tensor,
    bn: LayerCache,
    d2: Tensor,
    a: Tensor,
    pooled: Tensor,
    r1: Tensor,
    r2: Tensor,
    s: Tensor,
    p: Tensor,
    project_bn: LayerCache,
}

fn bn_backward(bn: &mut BatchNorm, cache: &LayerCache, dy: &Tensor, accumulate: bool) -> Tensor {
    match cache {
        LayerCache::Bn { xhat, inv_std, train } => bn
            .backward(dy.shape, xhat, inv_std, *train, dy, accumulate, true)
            .expect("need_dx requested"),
        _ => panic!("batch-norm cache expected"),
    }
}

impl MbConv {
    pub fn new<R: Rng + ?Sized>(spec: &MbConvSpec, rng: &mut R) -> Self {
        let p = &spec.prefix;
        let c = spec.in_channels * spec.expand_ratio;
        let expand = (spec.expand_ratio != 1).then(|| {
            (
                Conv2d::new(&format!("{p}expand_conv"), spec.in_channels, c, 1, 1, Padding::default(), false, rng),
                BatchNorm::new(&format!("{p}expand_bn"), c),
            )
        });
        let padding = if spec.stride == 2 {
            let (h, _) = spec.input_hw;
            if h % 2 == 0 {
                Padding::stride2_even(spec.kernel)
            } else {
                Padding::same(spec.kernel)
            }
        } else {
            Padding::same(spec.kernel)
        };
        let reduced = ((spec.in_channels as f32 * spec.se_ratio) as usize).max(1);
        MbConv {
            expand,
            dwconv: Conv2d::depthwise(&format!("{p}dwconv"), c, spec.kernel, spec.stride, padding, rng),
            bn: BatchNorm::new(&format!("{p}bn"), c),
            se_reduce: Conv2d::new(&format!("{p}se_reduce"), c, reduced, 1, 1, Padding::default(), true, rng),
            se_expand: Conv2d::new(&format!("{p}se_expand"), reduced, c, 1, 1, Padding::default(), true, rng),
            project: Conv2d::new(&format!("{p}project_conv"), c, spec.out_channels, 1, 1, Padding::default(), false, rng),
            project_bn: BatchNorm::new(&format!("{p}project_bn"), spec.out_channels),
            skip: spec.stride == 1 && spec.in_channels == spec.out_channels,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, MbConvCache) {
        let swish = Activation::Swish;
        let (dw_in, expand) = match &mut self.expand {
            Some((conv, bn)) => {
                let e1 = conv.forward(x);
                let (e2, c) = bn.forward(&e1, mode);
                (swish.forward(&e2), Some((c, e2)))
            }
            None => (x.clone(), None),
        };
        let d1 = self.dwconv.forward(&dw_in);
        let (d2, bn_cache) = self.bn.forward(&d1, mode);
        let a = swish.forward(&d2);

        let pooled = global_avg_pool(&a);
        let r1 = self.se_reduce.forward(&pooled);
        let r2 = swish.forward(&r1);
        let s1 = self.se_expand.forward(&r2);
        let s = Activation::Sigmoid.forward(&s1);

        let mut p = a.clone();
        let c = a.channels();
        let plane = a.plane();
        par::for_each_chunk_mut(&mut p.data, c * plane, |i, ps| {
            for ch in 0..c {
                let g = s.data[i * c + ch];
                ps[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v *= g);
            }
        });

        let o1 = self.project.forward(&p);
        let (mut y, pbn) = self.project_bn.forward(&o1, mode);
        if self.skip {
            y.data.iter_mut().zip(&x.data).for_each(|(o, i)| *o += i);
        }
        let cache = MbConvCache {
            x: x.clone(),
            expand,
            dw_in,
            bn: bn_cache,
            d2,
            a,
            pooled,
            r1,
            r2,
            s,
            p,
            project_bn: pbn,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &MbConvCache, dy: &Tensor, accumulate: bool, need_dx: bool) -> Option<Tensor> {
        if !accumulate && !need_dx {
            return None;
        }
        let swish = Activation::Swish;
        let do1 = bn_backward(&mut self.project_bn, &cache.project_bn, dy, accumulate);
        let dp = self
            .project
            .backward(&cache.p, &do1, accumulate, true)
            .expect("need_dx requested");

        let a = &cache.a;
        let c = a.channels();
        let plane = a.plane();
        let n = a.batch();
        // gate gradient: ds[n, c] = sum_hw dp * a
        let mut ds = Tensor::zeros([n, c, 1, 1]);
        for i in 0..n {
            let dps = dp.sample(i);
            let as_ = a.sample(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                ds.data[i * c + ch] = dps[r.clone()].iter().zip(&as_[r]).map(|(x, y)| x * y).sum();
            }
        }
        let s = &cache.s;
        ds.data.iter_mut().zip(&s.data).for_each(|(d, sv)| *d *= sv * (1.0 - sv));
        let dr2 = self
            .se_expand
            .backward(&cache.r2, &ds, accumulate, true)
            .expect("need_dx requested");
        let dr1 = swish.backward(&cache.r1, &dr2);
        let dpooled = self
            .se_reduce
            .backward(&cache.pooled, &dr1, accumulate, true)
            .expect("need_dx requested");
        let mut da = global_avg_pool_backward(a.shape, &dpooled);
        par::for_each_chunk_mut(&mut da.data, c * plane, |i, das| {
            let dps = dp.sample(i);
            for ch in 0..c {
                let g = s.data[i * c + ch];
                for k in ch * plane..(ch + 1) * plane {
                    das[k] += dps[k] * g;
                }
            }
        });

        let dd2 = swish.backward(&cache.d2, &da);
        let dd1 = bn_backward(&mut self.bn, &cache.bn, &dd2, accumulate);
        let need_dw_dx = need_dx || (accumulate && self.expand.is_some());
        let dh = self.dwconv.backward(&cache.dw_in, &dd1, accumulate, need_dw_dx);

        let mut dx = match (&mut self.expand, &cache.expand) {
            (Some((conv, bn)), Some((bn_cache, e2))) => {
                let dh = dh.expect("requested");
                let de2 = swish.backward(e2, &dh);
                let de1 = bn_backward(bn, bn_cache, &de2, accumulate);
                conv.backward(&cache.x, &de1, accumulate, need_dx)
            }
            _ => dh,
        };
        if self.skip {
            if let Some(dx) = &mut dx {
                dx.data.iter_mut().zip(&dy.data).for_each(|(a, b)| *a += b);
            }
        }
        dx
    }

    fn bns(&self) -> Vec<&BatchNorm> {
        let mut v = Vec::new();
        if let Some((_, bn)) = &self.expand {
            v.push(bn);
        }
        v.push(&self.bn);
        v.push(&self.project_bn);
        v
    }

    pub fn learnable(&self) -> Vec<(String, Vec<&Param>)> {
        let mut out = Vec::new();
        if let Some((conv, bn)) = &self.expand {
            out.push((conv.name.clone(), conv.params()));
            out.push((bn.name.clone(), vec![&bn.gamma, &bn.beta]));
        }
        out.push((self.dwconv.name.clone(), self.dwconv.params()));
        out.push((self.bn.name.clone(), vec![&self.bn.gamma, &self.bn.beta]));
        out.push((self.se_reduce.name.clone(), self.se_reduce.params()));
        out.push((self.se_expand.name.clone(), self.se_expand.params()));
        out.push((self.project.name.clone(), self.project.params()));
        out.push((self.project_bn.name.clone(), vec![&self.project_bn.gamma, &self.project_bn.beta]));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        if let Some((conv, bn)) = &mut self.expand {
            out.extend(conv.params_mut());
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.extend(self.dwconv.params_mut());
        out.push(&mut self.bn.gamma);
        out.push(&mut self.bn.beta);
        out.extend(self.se_reduce.params_mut());
        out.extend(self.se_expand.params_mut());
        out.extend(self.project.params_mut());
        out.push(&mut self.project_bn.gamma);
        out.push(&mut self.project_bn.beta);
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Buffer)> {
        self.bns()
            .into_iter()
            .flat_map(|bn| [(bn.name.clone(), &bn.running_mean), (bn.name.clone(), &bn.running_var)])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Buffer)> {
        let MbConv {
            expand,
            bn,
            project_bn,
            ..
        } = self;
        let mut bns: Vec<&mut BatchNorm> = Vec::new();
        if let Some((_, b)) = expand {
            bns.push(b);
        }
        bns.push(bn);
        bns.push(project_bn);
        let mut out = Vec::new();
        for b in bns {
            let BatchNorm {
                name,
                running_mean,
                running_var,
                ..
            } = b;
            out.push((name.clone(), running_mean));
            out.push((name.clone(), running_var));
        }
        out
    }
}
