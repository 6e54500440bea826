// Scratch diagnostic: compare training-path loss with inference-path
// decoding on the same conversation prefix.

use cape_core::checkpoint;
use cape_core::codec::CoordCodec;
use cape_core::config::RunConfig;
use cape_core::data::Split;
use cape_core::decode::{generate_answer, DecodeStrategy};
use cape_core::infer::InferSession;
use cape_core::instructions::{build_round, render_conversation, Templates};
use cape_core::model::ModelBundle;
use cape_core::pipeline::load_data;
use cape_core::rng::stream;
use cape_core::train::{sequence_loss, shifted_supervision};
use cape_core::vocab::Vocabulary;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(std::path::Path::new(&args[1]), &[]).unwrap();
    let ckpt = std::path::Path::new(&args[2]);
    let vocab = Vocabulary::default_charset();
    let codec = CoordCodec::with_k(3).unwrap();
    let templates = Templates::builtin();
    let (dataset, registry, _) = load_data(&cfg).unwrap();
    let mut model = ModelBundle::init(&cfg.model, &vocab, cfg.seed).unwrap();
    checkpoint::load_into(&mut model.params, ckpt).unwrap();

    let samples = dataset.split_samples(Split::Train);
    for (si, sample) in samples.iter().enumerate().take(4) {
        let category = dataset.category(sample.category_id).unwrap();
        let specs = registry.keypoints(&category.name).unwrap();
        let mut rng = stream(cfg.seed, &[0]);
        let round = build_round(&specs[0], &category.keypoints, &cfg.style, &templates, &mut rng)
            .unwrap();
        let target = (sample.keypoints[0].x, sample.keypoints[0].y);
        let rendered =
            render_conversation(&[round], &[target], &vocab, &codec, None).unwrap();
        let (targets, weights) = shifted_supervision(&rendered.tokens, &rendered.answer_mask);
        let image = sample.image.to_image();
        let (loss, _) = sequence_loss(&model, &image, &rendered.tokens, &targets, &weights).unwrap();

        // Inference on the identical prefix: everything before the answer span.
        let (span_start, _) = rendered.answer_spans[0];
        let prefix = &rendered.tokens[..span_start];
        let mut session = InferSession::new(&model, &image).unwrap();
        session.prefill(prefix).unwrap();
        let mut gen_rng = stream(cfg.seed, &[1]);
        let ans = generate_answer(
            &mut session,
            &vocab,
            &codec,
            &DecodeStrategy::Greedy,
            true,
            &mut gen_rng,
            32,
        )
        .unwrap();
        println!(
            "sample {si} cat={} kp0 gt=({:.3},{:.3}) loss={loss:.4} decoded={} ({:.3},{:.3})",
            category.name, target.0, target.1, ans.text, ans.x, ans.y
        );
    }
}
