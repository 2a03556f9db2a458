//! Trains the default toy model on the synthetic language (or loads a saved
//! checkpoint) and prints the vanilla vs Lambda comparisons.
//!
//! Usage: reproduce_trends [CHECKPOINT] [STEPS]

use std::path::PathBuf;
use std::time::Instant;

use lm_infinite::corpus::SyntheticLanguage;
use lm_infinite::diagnostics::{
    entropy_curve, logit_profile, mean_entropy_at, position_projection,
};
use lm_infinite::eval::{
    bench, continuation_eval, lambda_generation_cells, nll_curve, truncation_baseline,
    MilestoneSpec,
};
use lm_infinite::model::{load_checkpoint, save_checkpoint, TrainConfig};
use lm_infinite::{AttentionMode, ToyModel, ToyModelConfig};

fn main() -> lm_infinite::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = PathBuf::from(args.get(1).map_or("toy.lmtm", String::as_str));
    let steps: usize = args.get(2).map_or(800, |s| s.parse().expect("steps"));
    let config = ToyModelConfig::default();
    let mut groups =
        SyntheticLanguage::default().generate_groups(0, &[(steps * 8, 129), (32, 1152)])?;
    let held_out = groups.pop().unwrap();
    let data = groups.pop().unwrap();

    let model = if ckpt.exists() {
        load_checkpoint(&ckpt)?
    } else {
        let mut model = ToyModel::init(config.clone())?;
        let mut tc = TrainConfig::new(steps, 3e-3, 8, config.train_len);
        tc.log_every = 50;
        let t = Instant::now();
        let report = model.train(&data, &tc)?;
        println!("trained {steps} steps in {:.1}s", t.elapsed().as_secs_f64());
        for (s, l) in report.losses {
            println!("  step {s}: {l:.4}");
        }
        save_checkpoint(&model, &ckpt)?;
        model
    };

    let nll_spec = MilestoneSpec::parse("1x,2x,4x,8x", 128)?;
    for mode in [AttentionMode::VanillaCausal, AttentionMode::Lambda] {
        let t = Instant::now();
        let curve = nll_curve(&model, &held_out, &nll_spec, mode)?;
        let cells: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{}={:.3}", p.milestone, p.nll))
            .collect();
        println!(
            "nll {mode}: {} ({:.1}s)",
            cells.join(" "),
            t.elapsed().as_secs_f64()
        );
    }
    let cont_spec = MilestoneSpec::parse("1x,8x", 128)?;
    for mode in [AttentionMode::VanillaCausal, AttentionMode::Lambda] {
        let t = Instant::now();
        let curve = continuation_eval(&model, &held_out, &cont_spec, 100, mode)?;
        let cells: Vec<String> = curve
            .points
            .iter()
            .map(|p| {
                format!(
                    "{}: bleu={:.4} rouge={:.4}",
                    p.milestone, p.bleu, p.rouge_lsum
                )
            })
            .collect();
        println!(
            "continuation {mode}: {} ({:.1}s)",
            cells.join(" | "),
            t.elapsed().as_secs_f64()
        );
    }

    let mut no_prefix = model.clone();
    no_prefix.config.attention.mask_params.n_global = 0;
    let curve = nll_curve(&no_prefix, &held_out, &nll_spec, AttentionMode::Lambda)?;
    let cells: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{}={:.3}", p.milestone, p.nll))
        .collect();
    println!("nll lambda without pinned prefix: {}", cells.join(" "));

    let mask = model.config.attention.mask_params;
    let lambda_cells = lambda_generation_cells(1024, 100, &mask)?;
    println!("lambda generation at 1024: {lambda_cells} attention cells");
    for window in [32, 64, 96, 128] {
        let t = truncation_baseline(&model, &held_out, window, 1024, 100)?;
        println!(
            "truncation window {window}: bleu={:.4} rouge={:.4} cells={}",
            t.bleu, t.rouge_lsum, t.attention_cells
        );
    }

    let (mut near, mut far) = (0f64, 0f64);
    for seq in held_out.iter().take(8) {
        for layer in 0..model.config.n_layers {
            let p = logit_profile(
                &model,
                &seq[..1024],
                layer,
                0,
                AttentionMode::VanillaCausal,
                64,
            )?;
            near = near.max(p.absmax_between(0, 128).unwrap());
            far = far.max(p.absmax_between(512, usize::MAX).unwrap());
        }
    }
    println!("logits vanilla: absmax <=128 {near:.3}  >512 {far:.3}");
    let mut e128 = 0.0;
    let mut e1024 = 0.0;
    for seq in held_out.iter().take(8) {
        let curve = entropy_curve(
            &model,
            &seq[..1024],
            AttentionMode::VanillaCausal,
            &[128, 1024],
        )?;
        e128 += mean_entropy_at(&curve, 128).unwrap() / 8.0;
        e1024 += mean_entropy_at(&curve, 1024).unwrap() / 8.0;
    }
    println!("entropy vanilla: 128={e128:.3} 1024={e1024:.3}");
    let windows: Vec<&[u32]> = held_out.iter().map(|s| &s[..128]).collect();
    for layer in 0..model.config.n_layers {
        let proj = position_projection(&model, &windows, layer)?;
        println!(
            "pca layer {layer}: separation {:.3} explained {:.3?}",
            proj.separation(0..16, 112..128),
            proj.pca.explained_ratio
        );
    }
    for mode in [AttentionMode::VanillaCausal, AttentionMode::Lambda] {
        let a = bench(&model, 512, mode, 3)?;
        let b = bench(&model, 2048, mode, 3)?;
        println!(
            "bench {mode}: encode {:.3}s -> {:.3}s (x{:.2}), decode {:.2e} -> {:.2e} (x{:.2}), peak {}",
            a.encode_seconds,
            b.encode_seconds,
            b.encode_seconds / a.encode_seconds,
            a.decode_seconds_per_token,
            b.decode_seconds_per_token,
            b.decode_seconds_per_token / a.decode_seconds_per_token,
            b.peak_cache_entries
        );
    }
    Ok(())
}
