//! The remote backend against the bundled mock server: exact log-probability
//! round trip, retries, timeouts and fine-tuning jobs.
//!
//! cargo run --release --example remote_backend

use std::time::Duration;

use memlab::backend::mock::{Fault, MockServer};
use memlab::backend::{finetune, Backend, InProcessBackend, RemoteBackend, RemoteConfig};
use memlab::corpus::{SplitLabel, TokenSequence, Vocabulary};
use memlab::microlm::{MicroLmParams, ModelMode, ModelShape, TrainConfig};

fn main() -> memlab::Result<()> {
    let vocab = Vocabulary::byte();
    let params = MicroLmParams::init_with_scale(ModelShape::new(ModelMode::Causal, vocab.size(), 16, 64), 1, 0.3)?;
    let server = MockServer::start()?;
    server.add_model("demo", params.clone());
    println!("mock server at {}", server.base_url());

    let cfg = RemoteConfig { backoff_secs: 0.01, poll_interval_secs: 0.0, ..RemoteConfig::new(server.base_url(), "demo") };
    let remote = RemoteBackend::new(cfg.clone())?;
    let local = InProcessBackend::new(params);
    let x = vocab.encode("the quiet bell rings near the harbor")?;
    println!("remote == in-process log-probs: {}", remote.query_logprobs(&x)? == local.query_logprobs(&x)?);
    println!("capabilities: {:?}", remote.descriptor().capabilities);

    server.push_fault(Fault::Status(429));
    server.push_fault(Fault::Status(502));
    let before = server.request_count();
    remote.query_logprobs(&x)?;
    println!("two transient failures retried: {} requests", server.request_count() - before);

    let impatient = RemoteBackend::new(RemoteConfig { timeout_secs: 0.1, max_retries: 0, ..cfg })?;
    server.push_fault(Fault::Delay(Duration::from_millis(400)));
    println!("slow server: {}", impatient.query_logprobs(&x).unwrap_err());

    let data: Vec<_> = (0..4).map(|i| TokenSequence::new(format!("d{i}"), x.clone(), SplitLabel::Candidate)).collect();
    let train = TrainConfig { learning_rate: 1e-2, epochs: 2, batch_size: 2, ..TrainConfig::reference(0) };
    let job = finetune(&remote, &data, &train)?;
    println!("job {} -> {:?}, model {:?}", job.id, job.status, job.model);
    server.fail_next_job("quota exceeded");
    println!("failed job: {}", finetune(&remote, &data, &train).unwrap_err());
    Ok(())
}
