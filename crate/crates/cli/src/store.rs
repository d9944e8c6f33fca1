//! Conversions between pipeline objects and tensor bundles.

use serde::{Deserialize, Serialize};
use taptq::bundle::TensorBundle;
use taptq::calibration::{CalibrationPool, MomentExtractor};
use taptq::compensation::Adapter;
use taptq::numerics::Tensor;
use taptq::toynet::{ModuleIo, QuantPoint, QuantizedToyNet, SubmoduleQuant, ToyNet, ToyNetConfig};
use taptq::{Error, Result};

pub fn net_to_bundle(net: &ToyNet) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    for (name, t) in net.named_tensors() {
        b.push(name, t)?;
    }
    b.set_meta("config", &net.config)?;
    b.set_meta("outlier_channels", &net.outlier_channels)?;
    Ok(b)
}

pub fn net_from_bundle(b: &TensorBundle) -> Result<ToyNet> {
    let config: ToyNetConfig = b.meta("config")?;
    let outliers: Vec<usize> = b.meta("outlier_channels")?;
    ToyNet::from_named_tensors(config, outliers, &b.entries)
}

/// Samples keep their ids as entry names, in pool order.
pub fn pool_to_bundle(pool: &CalibrationPool) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    for s in &pool.samples {
        b.push(s.id.clone(), s.payload.clone())?;
    }
    b.set_meta("planted_outliers", &pool.planted_outliers)?;
    Ok(b)
}

pub fn pool_from_bundle(b: &TensorBundle) -> Result<CalibrationPool> {
    let mut pool = CalibrationPool::from_payloads(b.entries.clone(), &MomentExtractor)?;
    pool.planted_outliers = b.meta("planted_outliers").unwrap_or_default();
    Ok(pool)
}

fn weight_name(m: usize, point: QuantPoint) -> Option<String> {
    let block = m / 2;
    let local = match point {
        QuantPoint::Wq => "attn.wq",
        QuantPoint::Wk => "attn.wk",
        QuantPoint::Wv => "attn.wv",
        QuantPoint::Wo => "attn.wo",
        QuantPoint::W1 => "mlp.w1",
        QuantPoint::W2 => "mlp.w2",
        _ => return None,
    };
    Some(format!("block{block}.{local}"))
}

/// Weights are stored already fake-quantized; quantizers go in metadata.
pub fn qnet_to_bundle(q: &QuantizedToyNet) -> Result<TensorBundle> {
    let mut tensors = q.net.named_tensors();
    for (m, sq) in q.quant.iter().enumerate() {
        for (point, quantizer) in &sq.points {
            if let Some(name) = weight_name(m, *point) {
                let slot = tensors
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .expect("every weight point names a parameter");
                slot.1 = quantizer.apply(&slot.1)?;
            }
        }
    }
    let mut b = TensorBundle::new();
    for (name, t) in tensors {
        b.push(name, t)?;
    }
    b.set_meta("config", &q.net.config)?;
    b.set_meta("outlier_channels", &q.net.outlier_channels)?;
    b.set_meta("quantizers", &q.quant)?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub module: String,
    pub rank: usize,
    pub active: bool,
    pub fitted: bool,
    pub tre_at_fit: f64,
}

pub fn adapters_to_bundle(adapters: &[Adapter]) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    let mut meta = Vec::with_capacity(adapters.len());
    for (m, a) in adapters.iter().enumerate() {
        let name = ToyNet::submodule_name(m);
        b.push(format!("{name}.u"), a.u.clone())?;
        b.push(format!("{name}.v"), a.v.clone())?;
        b.push(format!("{name}.b"), a.b.clone())?;
        meta.push(AdapterMeta {
            module: name,
            rank: a.rank,
            active: a.active,
            fitted: a.fitted,
            tre_at_fit: a.tre_at_fit,
        });
    }
    b.set_meta("adapters", &meta)?;
    Ok(b)
}

pub fn adapters_from_bundle(b: &TensorBundle) -> Result<Vec<Adapter>> {
    let meta: Vec<AdapterMeta> = b.meta("adapters")?;
    meta.into_iter()
        .map(|m| {
            let get = |part: &str| b.require(&format!("{}.{part}", m.module)).cloned();
            Ok(Adapter {
                u: get("u")?,
                v: get("v")?,
                b: get("b")?,
                rank: m.rank,
                active: m.active,
                tre_at_fit: m.tre_at_fit,
                fitted: m.fitted,
            })
        })
        .collect()
}

pub fn qnet_from_bundles(qnet: &TensorBundle, adapters: &TensorBundle) -> Result<QuantizedToyNet> {
    let net = net_from_bundle(qnet)?;
    let quant: Vec<SubmoduleQuant> = qnet.meta("quantizers")?;
    let adapters = adapters_from_bundle(adapters)?;
    if quant.len() != net.n_submodules() || adapters.len() != net.n_submodules() {
        return Err(Error::Format("quantizer or adapter count does not match the network depth".into()));
    }
    Ok(QuantizedToyNet { net, quant, adapters })
}

pub fn calib_io_to_bundle(io: &[ModuleIo], samples: usize) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    for (m, rec) in io.iter().enumerate() {
        let name = ToyNet::submodule_name(m);
        b.push(format!("{name}.x"), rec.x.clone())?;
        b.push(format!("{name}.y"), rec.y.clone())?;
        b.push(format!("{name}.y_q"), rec.y_q.clone())?;
    }
    b.set_meta("samples", &samples)?;
    Ok(b)
}

pub fn calib_io_from_bundle(b: &TensorBundle, modules: usize) -> Result<Vec<ModuleIo>> {
    (0..modules)
        .map(|m| {
            let name = ToyNet::submodule_name(m);
            let get = |part: &str| -> Result<Tensor> { b.require(&format!("{name}.{part}")).cloned() };
            Ok(ModuleIo {
                x: get("x")?,
                y: get("y")?,
                y_q: get("y_q")?,
            })
        })
        .collect()
}
