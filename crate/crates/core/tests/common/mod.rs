#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use llm_corrector::hashing::SplitMix64;
use llm_corrector::ingest::{DatasetBundle, MoleculeRecord, PredictionSet, Split, TaskSpec};

const ATOMS: &[&str] = &["C", "C", "C", "N", "O", "c1ccccc1", "Cl", "F", "(=O)", "(C)", "S", "Br"];

/// A pseudo-SMILES string; chemistry validity is irrelevant here.
pub fn random_smiles(rng: &mut SplitMix64) -> String {
    let len = 3 + (rng.next_u64() % 10) as usize;
    (0..len)
        .map(|_| ATOMS[(rng.next_u64() % ATOMS.len() as u64) as usize])
        .collect()
}

pub struct Synthetic {
    pub bundle: DatasetBundle,
    pub valid: PredictionSet,
    pub test: PredictionSet,
}

/// Synthetic dataset with labels on every split and noisy model predictions.
pub fn synthetic(task: TaskSpec, n_train: usize, n_valid: usize, n_test: usize, seed: u64) -> Synthetic {
    let mut rng = SplitMix64::new(seed);
    let mut records = Vec::new();
    let mut preds = Vec::new();
    let splits = [(Split::Train, n_train), (Split::Valid, n_valid), (Split::Test, n_test)];
    let mut i = 0;
    for (split, n) in splits {
        for j in 0..n {
            let smiles = random_smiles(&mut rng);
            let (label, pred) = if task.is_classification() {
                // alternate classes so both are always present
                let y = ((j + rng.next_u64() as usize % 2) % 2) as f64;
                let noise = rng.next_f64() * 0.6;
                let p = if y == 1.0 { 0.4 + noise } else { 0.6 - noise };
                (y, p.clamp(0.0, 1.0))
            } else {
                let y = rng.next_f64() * 8.0 - 4.0;
                (y, y + (rng.next_f64() - 0.5) * 2.0)
            };
            let description =
                (!rng.next_u64().is_multiple_of(3)).then(|| format!("molecule {i} with {} characters", smiles.len()));
            let id = format!("m{i:05}");
            if split != Split::Train {
                preds.push((split, id.clone(), pred));
            }
            records.push(MoleculeRecord {
                id,
                smiles,
                description,
                split,
                label: Some(label),
            });
            i += 1;
        }
    }
    let bundle = DatasetBundle::new(task, records).unwrap();
    let pick = |s: Split| {
        PredictionSet::from_pairs(
            &bundle,
            s,
            preds.iter().filter(|p| p.0 == s).map(|p| (p.1.clone(), p.2)),
        )
        .unwrap()
    };
    let valid = pick(Split::Valid);
    let test = pick(Split::Test);
    Synthetic { bundle, valid, test }
}

/// Writes dataset, predictions and a config file into `dir`; returns the
/// config path.
pub fn write_project(dir: &Path, data: &Synthetic, extra_config: &str) -> std::path::PathBuf {
    let mut csv = Vec::new();
    data.bundle.write_csv(&mut csv).unwrap();
    std::fs::write(dir.join("molecules.csv"), csv).unwrap();
    for (name, set) in [("valid.jsonl", &data.valid), ("test.jsonl", &data.test)] {
        let mut buf = Vec::new();
        set.write_jsonl(&data.bundle, &mut buf).unwrap();
        std::fs::write(dir.join(name), buf).unwrap();
    }
    let task = if data.bundle.task.is_classification() {
        "classification"
    } else {
        "regression"
    };
    let config = format!(
        "task = {task}\n\
         dataset = molecules.csv\n\
         valid_predictions = valid.jsonl\n\
         test_predictions = test.jsonl\n\
         database_dir = db\n\
         output_dir = out\n\
         embed_dim = 64\n\
         {extra_config}\n"
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, config).unwrap();
    path
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub headers: Vec<String>,
    pub body: String,
}

pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<RecordedRequest>>>,
    _handle: JoinHandle<()>,
}

/// Minimal HTTP/1.1 server answering each request with `respond(n, body)`
/// where `n` counts requests from 0. One request per connection.
pub fn stub_server<F>(respond: F) -> StubServer
where
    F: Fn(usize, &str) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    let handle = std::thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                headers.push(line);
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).ok();
            let body = String::from_utf8_lossy(&body).into_owned();
            let (status, reply) = respond(n, &body);
            log.lock().unwrap().push(RecordedRequest { headers, body });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).ok();
        }
    });
    StubServer {
        url,
        requests,
        _handle: handle,
    }
}
