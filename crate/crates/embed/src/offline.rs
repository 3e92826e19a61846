use crate::{EmbedError, Embedder, Embedding};

/// Deterministic offline embedder: character n-grams hashed into `dim`
/// signed buckets, then L2-normalized.
///
/// The hash is a fixed-seed FNV-1a so vectors are identical across runs
/// and platforms. Bit 63 of the hash picks the sign, the rest the bucket.
pub struct OfflineHashEmbedder {
    dim: usize,
    orders: Vec<usize>,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

impl OfflineHashEmbedder {
    pub fn new(dim: usize, orders: Vec<usize>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidSpec("embedding dim must be > 0".into()));
        }
        if orders.is_empty() || orders.iter().any(|&n| n == 0) {
            return Err(EmbedError::InvalidSpec(
                "n-gram orders must be nonempty and positive".into(),
            ));
        }
        Ok(OfflineHashEmbedder { dim, orders })
    }

    pub fn with_defaults() -> Self {
        OfflineHashEmbedder::new(256, vec![1, 2, 3]).expect("default spec is valid")
    }
}

impl Embedder for OfflineHashEmbedder {
    fn id(&self) -> &str {
        "offline-hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut vector = vec![0.0; self.dim];
        let mut buf = String::new();
        for &order in &self.orders {
            if chars.len() < order {
                continue;
            }
            for window in chars.windows(order) {
                buf.clear();
                // order prefix keeps "ab" as a bigram distinct from "ab" split
                // into unigrams
                buf.push((b'0' + order.min(9) as u8) as char);
                buf.extend(window.iter());
                let h = fnv1a(buf.as_bytes());
                let bucket = (h & 0x7fff_ffff_ffff_ffff) as usize % self.dim;
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                vector[bucket] += sign;
            }
        }
        let mut embedding = Embedding {
            vector,
            provider_id: self.id().to_string(),
        };
        embedding.normalize();
        if embedding.norm() == 0.0 {
            // all n-gram signs cancelled; fall back to a single deterministic bucket
            let h = fnv1a(text.as_bytes());
            embedding.vector[(h as usize) % self.dim] = 1.0;
        }
        Ok(embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cosine;

    #[test]
    fn same_text_twice_is_identical() {
        let e = OfflineHashEmbedder::with_defaults();
        let a = e.embed("宫保鸡丁的做法").unwrap();
        let b = e.embed("宫保鸡丁的做法").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_norm_is_one() {
        let e = OfflineHashEmbedder::with_defaults();
        for text in ["a", "薯条", "a longer english sentence about braising pork"] {
            let emb = e.embed(text).unwrap();
            assert!((emb.norm() - 1.0).abs() <= 1e-12, "norm for {text:?}");
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = OfflineHashEmbedder::with_defaults();
        assert!(matches!(e.embed(""), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn thousand_distinct_strings_do_not_collide() {
        let e = OfflineHashEmbedder::with_defaults();
        let texts: Vec<String> = (0..1000)
            .map(|i| format!("sample text number {i} about ingredient {}", i * 7 % 97))
            .collect();
        let embeddings: Vec<Embedding> =
            texts.iter().map(|t| e.embed(t).unwrap()).collect();
        let mut max_cos = f64::NEG_INFINITY;
        for i in 0..embeddings.len() {
            for j in (i + 1)..embeddings.len() {
                let c = cosine(&embeddings[i], &embeddings[j]).unwrap();
                max_cos = max_cos.max(c);
            }
        }
        assert!(max_cos < 0.99, "max pairwise cosine {max_cos}");
    }

    #[test]
    fn known_hash_is_stable() {
        // freezes the FNV-1a construction; a change here breaks stored
        // embeddings and screening checkpoints
        assert_eq!(fnv1a(b"umami"), 0x0b70_1b47_9d69_43ac);
    }
}
