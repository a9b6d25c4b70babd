use std::fs;
use std::path::Path;

use serde_json::json;

use dynimg::compose::{build_dynimg, patchify, plan_layout};
use dynimg::config::RunConfig;
use dynimg::harness::{
    attention_mass, make_split, object_prompt_masses, prompt_tokens, static_control, toy_train, token_budget, SampleBuilder,
    TrainRun, HELD_OUT,
};
use dynimg::io::atomic_write;
use dynimg::media::{plan_groups, probe, write_frames_dir, IndexFile, Pattern, SynthSpec, VideoSource};
use dynimg::rng::{self, streams};
use dynimg::rope::{angles, build_coords, prompt_times, Segment, ThetaSchedule};
use dynimg::{dtns, Error, Result};

use crate::args::*;
use crate::output::{with_config, write_dtns, write_json, write_png};
use crate::plot::{line_chart, PALETTE};

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn apply_pipeline(c: &mut RunConfig, f: &PipelineFlags) {
    if let Some(v) = f.keyframe_size {
        c.layout.keyframe_size = v;
    }
    if let Some(v) = f.patch {
        c.layout.patch = v;
    }
    if let Some(v) = f.n_prompts {
        c.layout.n_prompts = v;
    }
    if let Some(v) = f.num_dynimg {
        c.num_dynimg = v;
    }
    if f.augment {
        c.aug.enabled = true;
    }
    c.rope = f.rope.apply(c.rope);
}

fn apply_toy(c: &mut RunConfig, f: &ToyFlags) {
    let t = &mut c.toy.train;
    if let Some(v) = f.task {
        t.task = v;
    }
    if let Some(v) = f.steps {
        t.steps = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch {
        t.batch = v;
    }
    if let Some(v) = f.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = f.fusion {
        c.toy.model.fusion = v.into();
    }
    c.rope = f.rope.apply(c.rope);
}

fn finish(c: RunConfig) -> Result<RunConfig> {
    let c = c.resolve();
    c.validate()?;
    Ok(c)
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::from)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::Probe(a) => cmd_probe(a),
        Command::Synth(a) => cmd_synth(a, &finish(cfg)?),
        Command::Compose(a) => {
            apply_pipeline(&mut cfg, &a.pipeline);
            cfg.paths.input = Some(a.video.clone());
            cfg.paths.out_dir = Some(a.out.clone());
            cmd_compose(a, &finish(cfg)?)
        }
        Command::Coords(a) => {
            apply_pipeline(&mut cfg, &a.pipeline);
            cfg.paths.input = a.video.clone();
            cfg.paths.out_dir = Some(a.out.clone());
            cmd_coords(a, &finish(cfg)?)
        }
        Command::Tokens(a) => {
            if let Some(k) = a.num_dynimg {
                cfg.num_dynimg = k;
            }
            cmd_tokens(a, &finish(cfg)?)
        }
        Command::Train(a) => {
            apply_toy(&mut cfg, &a.toy);
            cfg.paths.out_dir = Some(a.out.clone());
            cmd_train(a, &finish(cfg)?)
        }
        Command::Attn(a) => {
            apply_toy(&mut cfg, &a.toy);
            cfg.paths.out_dir = Some(a.out.clone());
            cmd_attn(a, &finish(cfg)?)
        }
    }
}

fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    let meta = probe(&VideoSource::open(&a.path)?)?;
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&meta)?,
        Format::Compact => serde_json::to_string(&meta)?,
    };
    println!("{text}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let mut spec = SynthSpec::new(a.pattern, a.frames, a.width, a.height);
    spec.velocity = a.velocity.0;
    spec.object_size = a.size;
    spec.origin = a.origin.map(|p| p.0);
    spec.iframe_interval = a.iframe_interval;
    spec.fps = a.fps;
    spec.seed = cfg.seed;
    // a dot that does not move is the static pattern
    if spec.pattern == Pattern::MovingDot && spec.velocity == [0.0, 0.0] {
        spec.pattern = Pattern::Static;
    }
    if spec.pattern == Pattern::Static {
        spec.velocity = [0.0, 0.0];
    }
    spec.validate()?;
    let meta = write_frames_dir(&VideoSource::Synthetic(spec.clone()), &a.out)?;
    let index = IndexFile { fps: Some(meta.fps), iframes: Some(meta.iframe_indices.clone()) };
    let mut doc = serde_json::to_value(&index)?;
    doc["synth"] = serde_json::to_value(&spec)?;
    write_json(&a.out.join("index.json"), &doc)?;
    log::info!("wrote {} frames to {}", meta.frame_count, a.out.display());
    Ok(())
}

fn cmd_compose(a: &ComposeArgs, cfg: &RunConfig) -> Result<()> {
    let config = cfg.to_json();
    let source = VideoSource::open(&a.video)?;
    let meta = probe(&source)?;
    let layout = plan_layout(&cfg.layout)?;
    let groups = plan_groups(&meta, cfg.num_dynimg, cfg.layout.n_prompts, cfg.seed)?;
    out_dir(&a.out)?;

    let mut patches = Vec::new();
    let mut images = Vec::new();
    let mut times = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, streams::AUGMENT, i as u64);
        let (img, params) = build_dynimg(&source, g, &layout, &cfg.aug, &mut rng)?;
        let name = format!("dynimg_{i:02}.png");
        write_png(&a.out.join(&name), &cfg.aug.to_frame(&img.raster), &config)?;
        let block = patchify(&img.raster, &layout)?;
        patches.extend(block.values);
        times.push(prompt_times(g, meta.fps));
        images.push(json!({ "file": name, "group": g, "augmentation": params }));
    }

    let (tokens, dim) = (layout.num_patches(), layout.patch() * layout.patch() * 3);
    let patch_tensor = dtns::Tensor::f32(&[groups.len(), tokens, dim], &["image", "token", "value"], patches)?
        .with_meta(json!({ "config": config, "labels": layout.labels().iter().map(|k| k.code()).collect::<Vec<_>>() }));
    write_dtns(&a.out.join("patches.dtns"), &patch_tensor)?;

    let segments: Vec<Segment<'_>> =
        times.into_iter().map(|t| Segment::DynImg { layout: &layout, prompt_times: Some(t) }).collect();
    let grid = build_coords(&segments, cfg.rope.coord_options())?;
    write_dtns(&a.out.join("coords.dtns"), &grid.to_dtns(with_config(json!({}), &config))?)?;

    write_json(
        &a.out.join("layout.json"),
        &json!({ "config": config, "video": meta, "layout": layout.describe(), "images": images }),
    )?;
    log::info!("composed {} images into {}", groups.len(), a.out.display());
    Ok(())
}

fn cmd_coords(a: &CoordsArgs, cfg: &RunConfig) -> Result<()> {
    let config = cfg.to_json();
    let layout = plan_layout(&cfg.layout)?;
    let times: Vec<Option<Vec<f64>>> = match &a.video {
        Some(v) => {
            let meta = probe(&VideoSource::open(v)?)?;
            let groups = plan_groups(&meta, cfg.num_dynimg, cfg.layout.n_prompts, cfg.seed)?;
            groups.iter().map(|g| Some(prompt_times(g, meta.fps))).collect()
        }
        None => vec![None; cfg.num_dynimg],
    };
    let mut segments = vec![Segment::Text(a.text_before)];
    segments.extend(times.into_iter().map(|t| Segment::DynImg { layout: &layout, prompt_times: t }));
    segments.push(Segment::Text(a.text_after));
    let grid = build_coords(&segments, cfg.rope.coord_options())?;
    let sched = ThetaSchedule::new(cfg.harness.head_dim(), cfg.rope)?;
    let ang = angles(&grid, &sched)?;
    out_dir(&a.out)?;
    let meta = with_config(json!({ "text_before": a.text_before, "text_after": a.text_after }), &config);
    write_dtns(&a.out.join("coords.dtns"), &grid.to_dtns(meta.clone())?)?;
    write_dtns(&a.out.join("angles.dtns"), &ang.to_dtns(meta)?)?;
    Ok(())
}

fn cmd_tokens(a: &TokensArgs, cfg: &RunConfig) -> Result<()> {
    let images = if a.no_dynimg { a.frames } else { cfg.num_dynimg };
    if images == 0 {
        return Err(Error::InvalidConfig("need at least one frame".into()));
    }
    let pool = match a.pool {
        Some(Shape3(p)) => p,
        None => {
            let [_, r, c] = cfg.harness.pool_shape;
            [images, r, c]
        }
    };
    if pool.contains(&0) {
        return Err(Error::InvalidConfig(format!("pool shape {pool:?} has an empty axis")));
    }
    let b = token_budget(pool, images);
    let report = json!({
        "visual_tokens": b.visual_tokens,
        "per_image": b.per_dynimg,
        "baseline_16frame": b.baseline_16frame,
        "pool_shape": b.pool_shape,
        "images": images,
        "dynimg": !a.no_dynimg,
        "config": cfg.to_json(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<TrainRun> {
    let every = (cfg.toy.train.steps / 20).max(1);
    toy_train(&cfg.toy, |r| {
        if r.step % every == 0 {
            log::info!("step {}: loss {:.4} batch accuracy {:.3}", r.step, r.loss, r.accuracy);
        }
    })
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let config = cfg.to_json();
    let run = train(cfg)?;
    out_dir(&a.out)?;
    let mut lines = Vec::new();
    for r in &run.trace {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    atomic_write(&a.out.join("trace.jsonl"), &lines)?;
    let budget = token_budget(cfg.toy.model.pool_shape, cfg.toy.num_dynimg);
    write_json(&a.out.join("summary.json"), &json!({ "summary": run.summary, "token_budget": budget, "config": config }))?;

    let loss: Vec<f64> = run.trace.iter().map(|r| r.loss).collect();
    let acc: Vec<f64> = run.trace.iter().map(|r| r.accuracy).collect();
    write_png(&a.out.join("loss.png"), &line_chart(&[(&loss, PALETTE[0]), (&acc, PALETTE[1])], 640, 360), &config)?;
    let norms: Vec<Vec<f64>> = (0..3).map(|d| run.trace.iter().map(|r| r.theta_norms[d]).collect()).collect();
    let series: Vec<(&[f64], [u8; 3])> = norms.iter().zip(PALETTE).map(|(v, c)| (v.as_slice(), c)).collect();
    write_png(&a.out.join("theta.png"), &line_chart(&series, 640, 360), &config)?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(())
}

fn cmd_attn(a: &AttnArgs, cfg: &RunConfig) -> Result<()> {
    let config = cfg.to_json();
    let exp = &cfg.toy;
    let run = train(cfg)?;
    let model = &run.model;
    let builder = SampleBuilder::new(&exp.layout, exp.model.fusion, &exp.aug, exp.num_dynimg, exp.seed)?;
    let pairs = exp.train.probe_pairs.max(1);
    let held_out = make_split(exp, &builder, HELD_OUT, pairs)?;
    let (layers, heads) = (model.config.layers, model.config.heads);
    let layout = &model.layout;
    let prompts = prompt_tokens(layout);
    let keyframe = layout.tokens_of(dynimg::compose::Region::Keyframe);

    let mut moving = vec![0.0; layers * heads];
    let mut still = vec![0.0; layers * heads];
    let mut kf_to_prompts = vec![0.0; layers * heads];
    let mut prompts_to_kf = vec![0.0; layers * heads];
    for i in 0..pairs {
        let (clip, sample, groups) = (&held_out.clips[i], &held_out.samples[i], &held_out.groups[i]);
        let control = static_control(clip, groups[0].keyframe_index);
        let (control_sample, control_groups) = builder.build(&control, exp.train.task, HELD_OUT + i as u64)?;
        let add = |acc: &mut Vec<f64>, v: Vec<f64>| acc.iter_mut().zip(v).for_each(|(a, v)| *a += v / pairs as f64);
        add(&mut moving, object_prompt_masses(model, clip, sample, groups)?);
        add(&mut still, object_prompt_masses(model, &control, &control_sample, &control_groups)?);
        let out = model.forward(sample, true)?;
        add(&mut kf_to_prompts, attention_mass(&out.enc_attn[0], &keyframe, &prompts)?);
        add(&mut prompts_to_kf, attention_mass(&out.enc_attn[0], &prompts, &keyframe)?);
    }
    let table: Vec<_> = (0..layers * heads)
        .map(|m| {
            json!({
                "layer": m / heads,
                "head": m % heads,
                "object_to_prompts": moving[m],
                "object_to_prompts_static": still[m],
                "keyframe_to_prompts": kf_to_prompts[m],
                "prompts_to_keyframe": prompts_to_kf[m],
            })
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    out_dir(&a.out)?;
    write_json(
        &a.out.join("attn.json"),
        &json!({
            "config": config,
            "summary": run.summary,
            "pairs": pairs,
            "mean": { "object_to_prompts": mean(&moving), "object_to_prompts_static": mean(&still),
                      "ratio": mean(&moving) / mean(&still) },
            "table": table,
        }),
    )?;
    let out = model.forward(&held_out.samples[0], true)?;
    let t = layout.num_patches();
    let values = out.enc_attn[0].iter().flat_map(|m| m.data.iter().copied()).collect();
    let maps = dtns::Tensor::f64(&[layers, heads, t, t], &["layer", "head", "query", "key"], values)?
        .with_meta(json!({ "config": config, "clip": held_out.clips[0].spec, "label": held_out.clips[0].label }));
    write_dtns(&a.out.join("attn_maps.dtns"), &maps)?;
    Ok(())
}
