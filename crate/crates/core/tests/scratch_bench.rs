use std::time::Instant;

use textrec_core::data::{Dataset, Domain, GlyphSample, Manifest, Split};
use textrec_core::train::{TrainConfig, Trainer};

#[test]
#[ignore]
fn print_desk_texts() {
    println!("=== config ===\n{}", TrainConfig::desk(17).to_text());
    println!("=== manifest ===\n{}", Manifest::desk(17).to_text());
    println!(
        "=== cache key === {:016x}",
        textrec_core::seeding::fnv1a64(
            format!("{}\n{}", TrainConfig::desk(17).to_text(), Manifest::desk(17).to_text())
                .as_bytes()
        )
    );
}

#[test]
#[ignore]
fn bench_desk_step() {
    let m = Manifest {
        train_count: 64,
        val_count: 8,
        test_count: 8,
        ..Manifest::desk(17)
    };
    let t0 = Instant::now();
    let ds = Dataset::generate(&m).unwrap();
    println!("generate 160 samples: {:.2}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig::desk(17);
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let sup: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Support).iter().collect();
    let tgt: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Target).iter().collect();

    let t0 = Instant::now();
    let (l_r, _) = tr.recognizer_step(&sup[..32], &tgt[..32]).unwrap();
    println!("stage1 recognizer_step batch 32: {:.2}s  L_R {l_r:.3}", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (l_r, _) = tr.recognizer_step(&sup[..32], &tgt[..32]).unwrap();
    println!("stage1 recognizer_step again:    {:.2}s  L_R {l_r:.3}", t0.elapsed().as_secs_f64());

    tr.state.stage = 2;
    let t0 = Instant::now();
    let l_d = tr.disc_step(&sup[..32], &tgt[..32]).unwrap();
    println!("stage2 disc_step batch 32:       {:.2}s  L_d {l_d:.3}", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (l_r, l_g) = tr.recognizer_step(&sup[..32], &tgt[..32]).unwrap();
    println!(
        "stage2 recognizer_step batch 32: {:.2}s  L_R {l_r:.3} L_g {l_g:.3}",
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let acc = tr.val_accuracy().unwrap();
    println!("val eval 16 samples dual-path:   {:.2}s  acc {acc:.3}", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn overfit_four_samples() {
    // If image/label pairing is sane, 4 fixed samples must memorize far
    // below the label-marginal floor within a few hundred AdaDelta steps.
    let m = Manifest {
        height: 16,
        width: 32,
        train_count: 4,
        val_count: 1,
        test_count: 1,
        min_len: 1,
        max_len: 2,
        ..Manifest::desk(41)
    };
    let ds = Dataset::generate(&m).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        micro_batch: 4,
        rnn_hidden: 64,
        disc_mid: 32,
        dec_hidden: 64,
        attn_dim: 64,
        ..TrainConfig::for_manifest(41, &m)
    };
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let sup: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Support).iter().collect();
    let tgt: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Target).iter().collect();
    for s in &sup {
        println!("support label: {}", s.label);
    }
    let t0 = Instant::now();
    for step in 1..=150 {
        let (l_r, _) = tr.recognizer_step(&sup, &tgt).unwrap();
        if step % 25 == 0 {
            let (l_sup, l_tgt) = path_losses(&tr, &sup, &tgt);
            println!(
                "step {step:3}  L_R {l_r:.4}  sup {l_sup:.4}  tgt {l_tgt:.4}  ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

#[test]
#[ignore]
fn probe_decoder_state() {
    // Which subsystem is frozen? Track parameter movement from init and
    // the magnitude of intermediate tensors after a short training burst.
    use textrec_core::tensor::Tape;
    let m = Manifest {
        height: 16,
        width: 32,
        train_count: 4,
        val_count: 1,
        test_count: 1,
        min_len: 1,
        max_len: 2,
        ..Manifest::desk(41)
    };
    let ds = Dataset::generate(&m).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        micro_batch: 4,
        rnn_hidden: 64,
        disc_mid: 32,
        dec_hidden: 64,
        attn_dim: 64,
        ..TrainConfig::for_manifest(41, &m)
    };
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let sup: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Support).iter().collect();
    let tgt: Vec<&GlyphSample> = ds.get(Split::Train, Domain::Target).iter().collect();

    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let snapshot = |tr: &Trainer| -> Vec<(String, Vec<f64>)> {
        tr.model
            .store
            .iter()
            .filter(|(_, p)| {
                ["out.w", "out.b", "gru.Wz", "gru.Wn", ".Wv", ".Wh", ".Wc", "down.w", "w_ih"]
                    .iter()
                    .any(|s| p.name.ends_with(s))
            })
            .map(|(_, p)| (p.name.clone(), p.data.clone()))
            .collect()
    };
    let before = snapshot(&tr);
    println!("tracked params: {:?}", before.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());

    {
        let mut tape = Tape::new(&tr.model.store);
        let xs = tape.constant(textrec_core::eval::stack_images(&sup).unwrap());
        let ps = tr.model.features(&mut tape, xs).unwrap();
        let sem = tr.model.semantics_bilstm(&mut tape, ps).unwrap();
        println!(
            "AT INIT: pooled rms {:.5}  sem rms {:.5}",
            rms(tape.data(ps)),
            rms(tape.data(sem))
        );
    }

    for _ in 1..=100 {
        tr.recognizer_step(&sup, &tgt).unwrap();
    }
    for (name, old) in &before {
        let id = tr.model.store.id(name).unwrap();
        let new = &tr.model.store.get(id).data;
        let delta: Vec<f64> = new.iter().zip(old).map(|(a, b)| a - b).collect();
        println!("{name:24} init_rms {:.5}  delta_rms {:.5}", rms(old), rms(&delta));
    }

    // forward probe on the support batch
    let model = &tr.model;
    let mut tape = Tape::new(&model.store);
    let xs = tape.constant(textrec_core::eval::stack_images(&sup).unwrap());
    let ps = model.features(&mut tape, xs).unwrap();
    let sem = model.semantics_bilstm(&mut tape, ps).unwrap();
    println!("pooled rms {:.5}  sem rms {:.5}", rms(tape.data(ps)), rms(tape.data(sem)));
    let labels: Vec<Vec<usize>> = sup
        .iter()
        .map(|s| textrec_core::decoder::encode_label(&s.label).unwrap())
        .collect();
    let traces = model
        .decoder
        .decode_greedy(&mut tape, ps, sem, cfg.variant, cfg.confidence_rule)
        .unwrap();
    for (i, tr_) in traces.iter().enumerate().take(2) {
        println!("sample {i} label {:?}", sup[i].label);
        for (t, st) in tr_.steps.iter().enumerate() {
            let amax = st.alpha_v.iter().cloned().fold(f64::MIN, f64::max);
            println!(
                "  t{t} tok {:2}  h_rms {:.4}  g_rms {:.5}  max_alpha_v {:.3}  p_max {:.3}",
                st.token,
                rms(&st.h),
                rms(&st.g),
                amax,
                st.probs.iter().cloned().fold(f64::MIN, f64::max)
            );
        }
    }
    let _ = labels;
}

/// Teacher-forced loss of each domain path separately, no optimizer.
fn path_losses(tr: &Trainer, sup: &[&GlyphSample], tgt: &[&GlyphSample]) -> (f64, f64) {
    use textrec_core::tensor::Tape;
    let model = &tr.model;
    let labels = |block: &[&GlyphSample]| -> Vec<Vec<usize>> {
        block
            .iter()
            .map(|s| textrec_core::decoder::encode_label(&s.label).unwrap())
            .collect()
    };
    let mut tape = Tape::new(&model.store);
    let xs = tape.constant(textrec_core::eval::stack_images(sup).unwrap());
    let ps = model.features(&mut tape, xs).unwrap();
    let sem_s = model.semantics_bilstm(&mut tape, ps).unwrap();
    let l_sup = model
        .decoder
        .decode_teacher_forced(&mut tape, ps, sem_s, &labels(sup), tr.cfg.variant)
        .unwrap();
    let xt = tape.constant(textrec_core::eval::stack_images(tgt).unwrap());
    let pt = model.features(&mut tape, xt).unwrap();
    let sem_t = model.semantics_generated(&mut tape, pt).unwrap();
    let l_tgt = model
        .decoder
        .decode_teacher_forced(&mut tape, pt, sem_t, &labels(tgt), tr.cfg.variant)
        .unwrap();
    (tape.data(l_sup)[0], tape.data(l_tgt)[0])
}
