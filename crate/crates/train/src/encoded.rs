use attnlab::context::{encode_context, EncodedContext, TokenSequence};
use attnlab::Mat;

/// A batch of contexts kept as token indices. Column `b * M + i` of the
/// implied `(N+M) x (B*M)` matrix has ones at the category of token `i` of
/// context `b` and at feature `N + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    n: usize,
    m: usize,
    tokens: Vec<usize>,
}

impl EncodedBatch {
    pub fn new(n: usize, m: usize, contexts: &[TokenSequence]) -> Self {
        let mut tokens = Vec::with_capacity(contexts.len() * m);
        for t in contexts {
            assert_eq!((t.n(), t.m()), (n, m), "context shape");
            tokens.extend_from_slice(t.tokens());
        }
        EncodedBatch { n, m, tokens }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn width(&self) -> usize {
        self.n + self.m
    }

    pub fn batch(&self) -> usize {
        self.tokens.len() / self.m
    }

    pub fn columns(&self) -> usize {
        self.tokens.len()
    }

    /// Active (category, position) feature rows of a column.
    #[inline]
    pub fn features(&self, col: usize) -> (usize, usize) {
        (self.tokens[col], self.n + col % self.m)
    }

    /// Consecutive sub-batches of at most `contexts` contexts each.
    pub fn chunks(&self, contexts: usize) -> Vec<EncodedBatch> {
        self.tokens
            .chunks(contexts.max(1) * self.m)
            .map(|t| EncodedBatch {
                n: self.n,
                m: self.m,
                tokens: t.to_vec(),
            })
            .collect()
    }

    pub fn context(&self, b: usize) -> TokenSequence {
        TokenSequence::new(self.n, self.tokens[b * self.m..(b + 1) * self.m].to_vec()).expect("valid stored tokens")
    }

    pub fn encode(&self, b: usize) -> EncodedContext {
        encode_context(&self.context(b))
    }

    pub fn dense(&self) -> Mat {
        let mut x = Mat::zeros(self.width(), self.columns());
        for col in 0..self.columns() {
            let (c, p) = self.features(col);
            x[(c, col)] = 1.0;
            x[(p, col)] = 1.0;
        }
        x
    }
}
