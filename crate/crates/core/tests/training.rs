mod common;

use mmn::trainer::Mechanisms;
use mmn::{generate, SynthConfig, TrainConfig, Trainer, Variant};

fn warmed_full<'a>(config: &TrainConfig, src: &'a mmn::SynthDataset, tgt: &'a mmn::SynthDataset) -> Trainer<'a> {
    let mut t = Trainer::new(config, Variant::Full, src, tgt).unwrap();
    for epoch in 0..config.schedule.total_epochs {
        t.run_epoch(epoch).unwrap();
    }
    assert!(t.domain_bank().is_some(), "no clusters formed");
    t
}

#[test]
fn full_without_part_domain_guidance_is_instance_on_frozen_batch() {
    let config = common::small_config();
    let (src, tgt) = generate(&config.synth).unwrap();
    let mut full = warmed_full(&config, &src, &tgt);
    full.config_mut().hyper.gamma = 0.0;
    full.config_mut().hyper.beta = 0.0;
    full.set_mechanisms(Mechanisms {
        guidance: false,
        ..full.mechanisms()
    });

    let mut inst = Trainer::new(&config, Variant::Instance, &src, &tgt).unwrap();
    inst.install_memories(full.instance_bank().cloned(), None, None).unwrap();
    *inst.params_mut() = full.params().clone();

    let emb = full.target_embeddings().unwrap();
    for batch in full.next_epoch_batches().iter().take(3) {
        let pre: Vec<_> = batch.target.iter().map(|&i| emb[i].clone()).collect();
        let sf = full.supervision(&batch.target, &pre).unwrap();
        let si = inst.supervision(&batch.target, &pre).unwrap();
        assert_eq!(sf.selections, si.selections);
        assert_eq!(sf.weights, si.weights);

        let (rf, gf, _, _) = full.batch_objective(full.params(), batch, &sf).unwrap();
        let (ri, gi, _, _) = inst.batch_objective(inst.params(), batch, &si).unwrap();
        assert!(rf.l_domain > 0.0, "domain loss should still be computed");
        assert_eq!(rf.l_source, ri.l_source);
        assert_eq!(rf.l_instance, ri.l_instance);
        assert_eq!(rf.total, ri.total);
        assert_eq!(gf, gi);
    }
}

#[test]
fn zero_lambda_writes_banks_but_trains_like_baseline() {
    let mut config = common::small_config();
    config.hyper.lambda = 0.0;
    let (src, tgt) = generate(&config.synth).unwrap();
    let full = mmn::run(&config, Variant::Full, &src, &tgt).unwrap();
    let base = mmn::run(&config, Variant::Baseline, &src, &tgt).unwrap();

    let bank = full.checkpoint.instance_bank.as_ref().unwrap();
    assert!((0..bank.len()).all(|i| bank.is_written(i)));
    for (f, b) in full.metrics.iter().zip(&base.metrics) {
        assert_eq!(f.l_source, b.l_source, "epoch {}", f.epoch);
        assert_eq!(f.total, f.l_source);
    }
    assert_eq!(full.checkpoint.params, base.checkpoint.params);
}

#[test]
fn domain_phase_past_the_end_equals_instance_part() {
    let mut config = common::small_config();
    config.schedule.domain_start_epoch = config.schedule.total_epochs + 1;
    let (src, tgt) = generate(&config.synth).unwrap();
    let full = mmn::run(&config, Variant::Full, &src, &tgt).unwrap();
    let ip = mmn::run(&config, Variant::InstancePart, &src, &tgt).unwrap();
    assert!(full.metrics.iter().all(|m| m.l_domain == 0.0 && !m.refreshed));
    assert_eq!(common::metrics_csv(&full), common::metrics_csv(&ip));
    assert_eq!(full.checkpoint.params, ip.checkpoint.params);
}

#[test]
fn baseline_allocates_no_memory() {
    let config = common::small_config();
    let r = common::train(&config, Variant::Baseline).unwrap();
    let ck = &r.checkpoint;
    assert!(ck.instance_bank.is_none() && ck.upper_bank.is_none());
    assert!(ck.bottom_bank.is_none() && ck.domain_bank.is_none());
    assert!(r.metrics.iter().all(|m| m.l_instance == 0.0 && m.l_domain == 0.0));
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn easy_target_is_nearest_centroid_separable() {
    let cfg = SynthConfig {
        domain_shift: 0.0,
        camera_noise: 0.05,
        camera_offset: 0.0,
        ..SynthConfig::default()
    };
    let (_, tgt) = generate(&cfg).unwrap();
    let d = tgt.d_in();
    let mut centroids = vec![vec![0.0; d]; tgt.num_ids];
    let mut counts = vec![0usize; tgt.num_ids];
    for (x, &id) in tgt.samples.iter().zip(&tgt.true_ids) {
        centroids[id].iter_mut().zip(x).for_each(|(c, v)| *c += v);
        counts[id] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = tgt
        .samples
        .iter()
        .zip(&tgt.true_ids)
        .filter(|(x, &id)| {
            let best = (0..tgt.num_ids)
                .min_by(|&a, &b| sq_dist(x, &centroids[a]).total_cmp(&sq_dist(x, &centroids[b])))
                .unwrap();
            best == id
        })
        .count();
    assert!(correct as f64 >= 0.99 * tgt.len() as f64, "{correct}/{}", tgt.len());
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn confusers_are_closer_whole_than_upper() {
    let cfg = SynthConfig {
        camera_noise: 0.0,
        camera_offset: 0.0,
        domain_shift: 0.0,
        ..SynthConfig::default()
    };
    let (_, tgt) = generate(&cfg).unwrap();
    let half = tgt.d_in() / 2;
    let first = |id: usize| tgt.true_ids.iter().position(|&t| t == id).unwrap();
    let mut pairs = 0;
    for a in 0..tgt.num_ids {
        let Some(b) = tgt.confuser_partner[a] else { continue };
        let (xa, xb) = (&tgt.samples[first(a)], &tgt.samples[first(b)]);
        assert!(cosine(xa, xb) > cosine(&xa[..half], &xb[..half]), "pair {a},{b}");
        pairs += 1;
    }
    assert!(pairs > 0);
}
