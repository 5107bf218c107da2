use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::table::TaskObjectTable;
use super::ClientError;
use crate::dataforge::DEFAULT_RANK_TABLE;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

pub trait CompletionClient: Sync {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, ClientError>;
}

/// Value of the `key: value` line of a rendered template.
pub fn field<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .map(str::trim)
}

/// What the offline client knows. The pair lists are test heuristics, not
/// a statement about real-world affordances.
#[derive(Clone, Debug)]
pub struct MockKnowledge {
    pub ranks: TaskObjectTable,
    /// Pairs the matcher wrongly proposes after the correct ones.
    pub spurious: Vec<(String, String)>,
    /// Pairs the inspector rejects, with the reason it gives.
    pub implausible: Vec<(String, String, String)>,
    /// Task phrases used to pad producer answers to ten lines.
    pub fillers: Vec<String>,
}

impl Default for MockKnowledge {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            ranks: TaskObjectTable::parse_tsv(DEFAULT_RANK_TABLE).expect("bundled table parses"),
            spurious: vec![("drink water with".into(), "blender".into())],
            implausible: vec![(
                "drink water with".into(),
                "blender".into(),
                "a blender is an appliance, not a drinking vessel".into(),
            )],
            fillers: s(&[
                "decorate a shelf with",
                "weigh down papers with",
                "play a game with",
                "fill a box with",
                "take a picture of",
                "practice drawing with",
                "build a tower with",
                "set up a display with",
                "clear space on a desk for",
                "keep a window open with",
                "test a scale with",
                "mark a spot with",
            ]),
        }
    }
}

/// Deterministic offline client answering the three bundled templates.
#[derive(Clone, Debug, Default)]
pub struct MockClient {
    pub seed: u64,
    pub knowledge: MockKnowledge,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            knowledge: MockKnowledge::default(),
        }
    }

    fn rng(&self, prompt: &str) -> ChaCha8Rng {
        let h = Sha256::digest(prompt.as_bytes());
        let k = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        ChaCha8Rng::seed_from_u64(self.seed ^ k)
    }

    fn produce(&self, prompt: &str, category: &str) -> String {
        let k = &self.knowledge;
        let mut lines: Vec<&str> = Vec::new();
        for r in &k.ranks.rows {
            if r.category == category && !lines.contains(&r.task.as_str()) {
                lines.push(&r.task);
            }
        }
        let mut fillers: Vec<&str> = k.fillers.iter().map(String::as_str).collect();
        fillers.shuffle(&mut self.rng(prompt));
        for f in fillers {
            if lines.len() >= 10 {
                break;
            }
            if !lines.contains(&f) {
                lines.push(f);
            }
        }
        lines.truncate(10);
        lines.join("\n")
    }

    fn match_task(&self, task: &str, candidates: &[&str]) -> String {
        let k = &self.knowledge;
        let mut chosen: Vec<(&str, u32)> = k
            .ranks
            .ranked(task)
            .into_iter()
            .filter(|(c, _)| candidates.contains(c))
            .collect();
        chosen.sort_by_key(|c| c.1);
        let mut next = chosen.len() as u32 + 1;
        for (t, c) in &k.spurious {
            if t == task && candidates.contains(&c.as_str()) && !chosen.iter().any(|x| x.0 == c) {
                chosen.push((c, next));
                next += 1;
            }
        }
        if chosen.is_empty() {
            return "none".into();
        }
        chosen.iter().map(|(c, r)| format!("{c}\t{r}")).collect::<Vec<_>>().join("\n")
    }

    fn inspect(&self, task: &str, pairs: &str) -> String {
        let k = &self.knowledge;
        pairs
            .split("; ")
            .filter_map(|p| p.split_once('='))
            .map(|(c, _)| {
                match k.implausible.iter().find(|(t, cc, _)| t == task && cc == c) {
                    Some((_, _, why)) => format!("remove\t{c}\t{why}"),
                    None => format!("keep\t{c}"),
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl CompletionClient for MockClient {
    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String, ClientError> {
        let role = field(prompt, "template").unwrap_or_default();
        if role.starts_with("producer") {
            let c = field(prompt, "category").ok_or(ClientError::Rejected("missing category".into()))?;
            Ok(self.produce(prompt, c))
        } else if role.starts_with("matcher") {
            let t = field(prompt, "task").ok_or(ClientError::Rejected("missing task".into()))?;
            let cands: Vec<&str> = field(prompt, "candidates").unwrap_or_default().split("; ").collect();
            Ok(self.match_task(t, &cands))
        } else if role.starts_with("inspector") {
            let t = field(prompt, "task").ok_or(ClientError::Rejected("missing task".into()))?;
            Ok(self.inspect(t, field(prompt, "pairs").unwrap_or_default()))
        } else {
            Err(ClientError::Rejected("unknown template".into()))
        }
    }
}

/// HTTP completion client. Posts `{prompt, params}` as JSON and reads the
/// `text` field of the JSON reply.
#[derive(Clone, Debug)]
pub struct RemoteClient {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout: Duration,
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
}

impl RemoteClient {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.into(),
            token_env: "AFFORD_LLM_TOKEN".into(),
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    fn once(&self, agent: &ureq::Agent, token: &str, body: &serde_json::Value) -> Result<String, ClientError> {
        let mut resp = agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(body)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err(ClientError::Transport(format!("status {status}")));
        }
        if status >= 400 {
            return Err(ClientError::Rejected(format!("status {status}: {text}")));
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ClientError::Rejected(e.to_string()))?;
        v.get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| ClientError::Rejected("reply has no `text` field".into()))
    }
}

impl CompletionClient for RemoteClient {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, ClientError> {
        let token = std::env::var(&self.token_env).map_err(|_| ClientError::Auth(self.token_env.clone()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::json!({ "prompt": prompt, "params": params });
        let mut delay = self.backoff;
        let mut last = ClientError::Transport("no attempt made".into());
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(delay);
                delay *= 2;
            }
            match self.once(&agent, &token, &body) {
                Ok(t) => return Ok(t),
                // client errors will not improve on retry
                Err(e @ ClientError::Rejected(_)) => return Err(e),
                Err(e) => last = e,
            }
        }
        Err(ClientError::Exhausted {
            attempts: self.attempts.max(1),
            last: Box::new(last),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn mock_is_pure() {
        let m = MockClient::new(3);
        let p = "template: producer v1\ncategory: cup";
        let a = m.complete(p, &DecodeParams::default()).unwrap();
        assert_eq!(a, m.complete(p, &DecodeParams::default()).unwrap());
        assert_eq!(a.lines().count(), 10);
        assert!(a.lines().any(|l| l == "drink water with"));
    }

    /// Serves `statuses` in order, one connection each, replying with a
    /// fixed JSON body.
    fn server(statuses: Vec<u16>) -> (String, thread::JoinHandle<usize>) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", l.local_addr().unwrap());
        let h = thread::spawn(move || {
            let mut served = 0;
            for status in statuses {
                let (mut s, _) = l.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                r.read_exact(&mut body).unwrap();
                let reply = r#"{"text":"cup\t1"}"#;
                write!(s, "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len()).unwrap();
                served += 1;
            }
            served
        });
        (url, h)
    }

    #[test]
    fn remote_retries_server_errors() {
        let (url, h) = server(vec![503, 500, 200]);
        let c = RemoteClient {
            token_env: "AFFORD_TEST_TOKEN_RETRY".into(),
            backoff: Duration::from_millis(1),
            ..RemoteClient::new(&url)
        };
        std::env::set_var("AFFORD_TEST_TOKEN_RETRY", "t");
        assert_eq!(c.complete("x", &DecodeParams::default()).unwrap(), "cup\t1");
        assert_eq!(h.join().unwrap(), 3);
    }

    #[test]
    fn remote_gives_up_after_three_attempts() {
        let (url, h) = server(vec![500, 500, 500]);
        let c = RemoteClient {
            token_env: "AFFORD_TEST_TOKEN_FAIL".into(),
            backoff: Duration::from_millis(1),
            ..RemoteClient::new(&url)
        };
        std::env::set_var("AFFORD_TEST_TOKEN_FAIL", "t");
        assert!(matches!(
            c.complete("x", &DecodeParams::default()),
            Err(ClientError::Exhausted { attempts: 3, .. })
        ));
        h.join().unwrap();
        let unauth = RemoteClient {
            token_env: "AFFORD_TEST_TOKEN_UNSET".into(),
            ..RemoteClient::new(&url)
        };
        assert_eq!(
            unauth.complete("x", &DecodeParams::default()),
            Err(ClientError::Auth("AFFORD_TEST_TOKEN_UNSET".into()))
        );
    }
}
