use std::path::Path;

use rctnet::backbone::{check_input_size, MAX_STRIDE};
use rctnet::checkpoint::Checkpoint;
use rctnet::data::{self, Normalization};
use rctnet::train::model_from_checkpoint;
use rctnet::{ConfusionCounts, Error, Result, Tensor32};

fn prob_to_gray(p: &Tensor32) -> Vec<u8> {
    p.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_predict(
    checkpoint: &Path,
    t1_path: &Path,
    t2_path: &Path,
    label: Option<&Path>,
    out: &Path,
    stages: bool,
    pad: bool,
    norm: &Normalization,
) -> Result<()> {
    let t1 = data::load_image(t1_path, norm)?;
    let t2 = data::load_image(t2_path, norm)?;
    if t1.shape() != t2.shape() {
        return Err(Error::shape("t1/t2", t1.shape(), t2.shape()));
    }
    let (h, w) = (t1.shape()[1], t1.shape()[2]);
    let up = |n: usize| n.div_ceil(MAX_STRIDE).max(1) * MAX_STRIDE;
    let (ph, pw) = if pad { (up(h), up(w)) } else { (h, w) };
    check_input_size(ph, pw)?;
    let truth = label.map(data::load_mask).transpose()?;
    if let Some(g) = &truth {
        if g.shape() != [1, h, w] {
            return Err(Error::shape("label", g.shape(), &[1, h, w]));
        }
    }

    let model = model_from_checkpoint(&Checkpoint::<f32>::load(checkpoint)?)?;
    let batch = |t: &Tensor32| data::pad_replicate(t, ph, pw).reshape(&[1, 3, ph, pw]);
    let pred = model.predict(&batch(&t1)?, &batch(&t2)?)?;
    let probs: Vec<Tensor32> = pred
        .probs
        .iter()
        .map(|p| data::crop_top_left(&p.clone().reshape(&[1, ph, pw]).expect("single sample"), h, w))
        .collect();
    let change: Vec<u8> = probs[0].data().iter().map(|&p| u8::from(p >= 0.5)).collect();

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    data::write_gray_png(&out.join("change_map.png"), w, h, change.iter().map(|&c| c * 255).collect())?;
    if stages {
        for (k, p) in probs.iter().enumerate() {
            data::write_gray_png(&out.join(format!("p{}.png", k + 1)), w, h, prob_to_gray(p))?;
        }
    }
    let changed = change.iter().filter(|&&c| c == 1).count();
    println!("{changed} of {} pixels changed", change.len());
    if let Some(g) = truth {
        let g: Vec<u8> = g.data().iter().map(|&v| v as u8).collect();
        data::write_rgb_png(&out.join("overlay.png"), w, h, data::confusion_overlay(&change, &g)?)?;
        let mut counts = ConfusionCounts::default();
        counts.accumulate(&change, &g)?;
        println!("{}", counts.metrics().table());
    }
    Ok(())
}
