use super::{CorpusError, FeatureSequence};
use crate::numkernel::Matrix;

/// Maps global frame ranges of a concatenated sequence back to videos.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatIndex {
    pub video_ids: Vec<String>,
    pub frames_per_video: usize,
}

impl ConcatIndex {
    /// Position in `video_ids` of the video owning global frame `frame`.
    pub fn video_of(&self, frame: usize) -> Option<usize> {
        let v = frame / self.frames_per_video;
        (v < self.video_ids.len()).then_some(v)
    }

    pub fn range_of(&self, video: usize) -> std::ops::Range<usize> {
        video * self.frames_per_video..(video + 1) * self.frames_per_video
    }
}

/// Samples `frames_per_video` frames per video at indexes
/// `floor(j·T/frames_per_video)` and stacks them in input order. The result
/// has one frame per second of concatenated time.
pub fn concat_for_retrieval(
    videos: &[FeatureSequence],
    frames_per_video: usize,
) -> Result<(FeatureSequence, ConcatIndex), CorpusError> {
    let first = videos.first().ok_or(CorpusError::EmptyInput)?;
    if frames_per_video == 0 {
        return Err(CorpusError::BadConfig("frames_per_video must be positive".into()));
    }
    let d = first.dim();
    let mut data = Vec::with_capacity(videos.len() * frames_per_video * d);
    for v in videos {
        if v.dim() != d {
            return Err(CorpusError::DimMismatch { expected: d, got: v.dim() });
        }
        let t = v.len();
        for j in 0..frames_per_video {
            data.extend_from_slice(v.frames.row(j * t / frames_per_video));
        }
    }
    let frames = Matrix::new(videos.len() * frames_per_video, d, data)?;
    let index = ConcatIndex { video_ids: videos.iter().map(|v| v.video_id.clone()).collect(), frames_per_video };
    Ok((FeatureSequence::new("concat", 1.0, frames)?, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, t: usize, fill: f64) -> FeatureSequence {
        let rows: Vec<[f64; 2]> = (0..t).map(|i| [fill, i as f64]).collect();
        FeatureSequence::new(id, 1.0, Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn single_video_is_its_samples() {
        let v = video("a", 200, 1.0);
        let (c, _) = concat_for_retrieval(std::slice::from_ref(&v), 100).unwrap();
        let idx: Vec<usize> = (0..100).map(|j| j * 2).collect();
        assert_eq!(c.frames, v.frames.select_rows(&idx));
    }

    #[test]
    fn three_videos_index_map() {
        let vs = vec![video("a", 150, 0.0), video("b", 300, 1.0), video("c", 100, 2.0)];
        let (c, map) = concat_for_retrieval(&vs, 100).unwrap();
        assert_eq!(c.len(), 300);
        assert_eq!(map.video_of(150), Some(1));
        assert_eq!(map.video_of(300), None);
        assert_eq!(c.frames.get(150, 0), 1.0);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(concat_for_retrieval(&[], 10), Err(CorpusError::EmptyInput)));
        let odd = FeatureSequence::new("x", 1.0, Matrix::zeros(5, 3)).unwrap();
        assert!(matches!(
            concat_for_retrieval(&[video("a", 5, 0.0), odd], 5),
            Err(CorpusError::DimMismatch { expected: 2, got: 3 })
        ));
    }
}
