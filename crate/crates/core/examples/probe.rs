use bdlm_core::*;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let params = model::load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let samples = tasks::read_jsonl(std::path::Path::new(&args[2])).unwrap();
    let temp: f32 = args[3].parse().unwrap();
    let mode = if args.get(4).map(String::as_str) == Some("static") {
        decoder::DecodeMode::Static
    } else {
        decoder::DecodeMode::Dynamic
    };
    let mut accs = Vec::new();
    for seed in [9999u64, 10000, 10001] {
        let thr: f32 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.9);
        let policy = decoder::DecodePolicy {
            mode,
            threshold: thr,
            temperature: temp,
            max_new_tokens: 48,
            seed,
        };
        let r = dipo::evaluate(&params, &samples, &policy).unwrap();
        accs.push(r.accuracy);
    }
    let mean = accs.iter().sum::<f32>() / accs.len() as f32;
    println!(
        "{} {:?} temp{} pass mean {:.4} seeds {:?}",
        args[1], mode, temp, mean, accs
    );
}
