use crate::lockfree::SortedList;
use crate::Key;

/// Fixed array of buckets, each a sorted chain of key records.
///
/// Records are created on first use and never removed, so a reference to a
/// record stays valid for the table's lifetime.
pub struct HashTable<R> {
    buckets: Box<[SortedList<Key, R>]>,
}

impl<R> HashTable<R> {
    pub fn new(buckets: usize) -> Self {
        let buckets = (0..buckets.max(1)).map(|_| SortedList::new()).collect();
        Self { buckets }
    }

    fn bucket(&self, key: Key) -> &SortedList<Key, R> {
        &self.buckets[key as usize % self.buckets.len()]
    }

    pub fn get(&self, key: Key) -> Option<&R> {
        self.bucket(key).get(key)
    }

    pub fn get_or_create(&self, key: Key, make: impl FnOnce() -> R) -> &R {
        self.bucket(key).get_or_insert_with(key, make).0
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// All records, bucket by bucket; ascending within a bucket.
    pub fn iter(&self) -> impl Iterator<Item = (Key, &R)> {
        self.buckets.iter().flat_map(|b| b.iter())
    }

    pub fn bucket_keys(&self, bucket: usize) -> Vec<Key> {
        self.buckets[bucket].iter().map(|(k, _)| k).collect()
    }
}
