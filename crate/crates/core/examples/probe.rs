// scratch probe for hyperparameter behavior; not part of the deliverable
use slotforge::config::PipelineConfig;
use slotforge::indicator::train_indicator;
use slotforge::pipeline::{self, Split};

fn main() {
    let mut cfg = PipelineConfig::toy();
    cfg.data.train_count = 64;
    cfg.data.val_count = 16;
    cfg.indicator.steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    if let Some(lr) = std::env::args().nth(2).and_then(|s| s.parse::<f64>().ok()) {
        cfg.indicator.lr = lr;
    }
    if let Some(b) = std::env::args().nth(3).and_then(|s| s.parse::<usize>().ok()) {
        cfg.indicator.batch_size = b;
    }
    if let Some(m) = std::env::args().nth(4).and_then(|s| s.parse::<f64>().ok()) {
        cfg.indicator.ema_momentum = m;
    }
    if let Some(s) = std::env::args().nth(5).and_then(|s| s.parse::<u64>().ok()) {
        cfg = cfg.with_master_seed(s);
    }
    let t0 = std::time::Instant::now();
    let train = pipeline::generate_split(&cfg, Split::Train, 4).unwrap();
    let val = pipeline::generate_split(&cfg, Split::Val, 4).unwrap();
    println!("data gen: {:?}", t0.elapsed());

    // patch-majority oracle: best possible patch-level fg/bg prediction
    {
        let patch = cfg.encoder.patch;
        let mut total = 0.0;
        for s in &val {
            let g = cfg.data.generator.image_size / patch;
            let mut labels = vec![0u32; g * g];
            for i in 0..g {
                for j in 0..g {
                    let mut fg = 0usize;
                    for y in 0..patch {
                        for x in 0..patch {
                            fg += s.fgbg_mask.label_at(i * patch + y, j * patch + x) as usize;
                        }
                    }
                    labels[i * g + j] = (fg * 2 > patch * patch) as u32;
                }
            }
            let pred = slotforge::metrics::SegmentationMask::new(g, g, labels, None)
                .unwrap()
                .upsample(patch);
            total += slotforge::metrics::binary_fg_iou(&pred, &s.fgbg_mask).unwrap();
        }
        println!("patch-majority oracle binary IoU: {:.4}", total / val.len() as f64);
    }

    let encoder = pipeline::build_encoder(&cfg).unwrap();
    let t0 = std::time::Instant::now();
    let (model, history) = train_indicator(&train, &encoder, &cfg.indicator).unwrap();
    println!(
        "indicator train ({} steps): {:?} ({:.1} ms/step)",
        cfg.indicator.steps,
        t0.elapsed(),
        t0.elapsed().as_millis() as f64 / cfg.indicator.steps as f64
    );
    for r in history.iter().step_by(25) {
        println!(
            "step {:4}  pixel {:+.4}  stuff {:+.4}  sep {:+.4}  total {:+.4}",
            r.step, r.pixel, r.stuff, r.sep, r.total
        );
    }
    if let Some(last) = history.last() {
        println!(
            "final     pixel {:+.4}  stuff {:+.4}  sep {:+.4}  total {:+.4}",
            last.pixel, last.stuff, last.sep, last.total
        );
    }
    let images: Vec<&slotforge::scene::Image> = val.iter().map(|s| &s.image).collect();
    let marginals = slotforge::indicator::slot_marginals(&images, &model, &encoder).unwrap();
    println!("val slot marginals: {:?}", marginals);
    let iou = pipeline::indicator_binary_iou(&val, &model, &encoder).unwrap();
    println!("val binary fg IoU: {iou:.4}");

    // prototype cosine diagnostics over the val set
    let mut pairs = Vec::new();
    for s in &val {
        let feats = encoder.encode(&s.image).unwrap();
        let mut g = slotforge::autodiff::Graph::new();
        let a = slotforge::indicator::teacher_assignment(&s.image, &model, &encoder).unwrap();
        let f = g.constant(feats.values());
        let sc = g.constant(a.scores());
        let (fg, bg) = slotforge::indicator::region_prototypes_g(&mut g, f, sc);
        pairs.push((g.value(fg).clone(), g.value(bg).clone()));
    }
    let cos = |a: &slotforge::Tensor, b: &slotforge::Tensor| {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        dot / (a.frob_norm() * b.frob_norm())
    };
    let (mut bb, mut bf, mut ff, mut cnt) = (0.0, 0.0, 0.0, 0);
    for i in 0..pairs.len() {
        for j in 0..pairs.len() {
            if i == j {
                continue;
            }
            bb += cos(&pairs[i].1, &pairs[j].1);
            bf += cos(&pairs[i].1, &pairs[j].0);
            ff += cos(&pairs[i].0, &pairs[j].0);
            cnt += 1;
        }
    }
    println!(
        "proto cosines: bg-bg {:.3}  bg-fg {:.3}  fg-fg {:.3}",
        bb / cnt as f64,
        bf / cnt as f64,
        ff / cnt as f64
    );

    // ascii render of the first four val masks (#: fg, .: bg) vs gt
    for s in val.iter().take(4) {
        let (mask, _) = slotforge::indicator::predict_fg_bg(&s.image, &model, &encoder).unwrap();
        let gh = mask.height();
        let gw = mask.width();
        println!("sample {} (left: pred fg, right: gt fg at patch res)", s.index);
        for i in 0..gh {
            let mut left = String::new();
            let mut right = String::new();
            for j in 0..gw {
                left.push(if mask.label_at(i, j) == 1 { '#' } else { '.' });
                // majority-vote gt at patch resolution
                let patch = encoder.patch();
                let mut fg_count = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        if s.fgbg_mask.label_at(i * patch + y, j * patch + x) == 1 {
                            fg_count += 1;
                        }
                    }
                }
                right.push(if fg_count * 2 > patch * patch { '#' } else { '.' });
            }
            println!("  {left}   {right}");
        }
    }
}
