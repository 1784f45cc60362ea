use super::Demonstration;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<Demonstration>,
    pub val: Vec<Demonstration>,
    pub test: Vec<Demonstration>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[Demonstration] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, split: Split, demo: Demonstration) {
        match split {
            Split::Train => self.train.push(demo),
            Split::Val => self.val.push(demo),
            Split::Test => self.test.push(demo),
        }
    }
}

/// 80/10/10 bucket for a demo id. Windows (`source#offset`) hash on their
/// source id so all windows of one recording share a split.
pub fn hash_bucket(id: &str) -> Split {
    let source = id.split('#').next().unwrap_or(id);
    let digest = Sha256::digest(source.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % 10;
    match bucket {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn split_by_hash(demos: &[Demonstration]) -> SplitAssignment {
    let mut out = SplitAssignment::default();
    for d in demos {
        out.push(hash_bucket(&d.id), d.clone());
    }
    out
}

/// First `n_train` demos train, the next `n_val` validate, the rest test.
pub fn split_by_index(demos: &[Demonstration], n_train: usize, n_val: usize) -> SplitAssignment {
    let n_train = n_train.min(demos.len());
    let n_val = n_val.min(demos.len() - n_train);
    SplitAssignment {
        train: demos[..n_train].to_vec(),
        val: demos[n_train..n_train + n_val].to_vec(),
        test: demos[n_train + n_val..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(id: &str) -> Demonstration {
        Demonstration::new(id, vec![], 5.0)
    }

    #[test]
    fn hash_split_is_stable_and_roughly_proportional() {
        let demos: Vec<_> = (0..2000).map(|i| demo(&format!("demo{i}"))).collect();
        let a = split_by_hash(&demos);
        let b = split_by_hash(&demos);
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 2000);
        assert!((1500..1700).contains(&a.train.len()), "{}", a.train.len());
        assert!((140..260).contains(&a.val.len()));
        assert!((140..260).contains(&a.test.len()));
    }

    #[test]
    fn windows_follow_their_source() {
        assert_eq!(hash_bucket("game7#0"), hash_bucket("game7#25"));
        assert_eq!(hash_bucket("game7#0"), hash_bucket("game7"));
    }

    #[test]
    fn index_split() {
        let demos: Vec<_> = (0..10).map(|i| demo(&i.to_string())).collect();
        let s = split_by_index(&demos, 6, 2);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s.test[0].id, "8");
    }
}
