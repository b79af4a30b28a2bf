#include "cpr/batch.hpp"

#include "cpr/util.hpp"

namespace cpr {

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& t, Index begin, Index end) {
  if (begin < 0 || end > t.dim(0) || begin > end)
    throw std::out_of_range("slice_rows: bad range");
  const Index row = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = end - begin;
  return Tensor<S>(s, t.array().segment(begin * row, (end - begin) * row));
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& t, std::span<const Index> rows) {
  const Index row = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = static_cast<Index>(rows.size());
  Tensor<S> out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.array().segment(static_cast<Index>(i) * row, row) = t.array().segment(rows[i] * row, row);
  return out;
}

template <typename S>
LabeledBatch<S> LabeledBatch<S>::slice(Index begin, Index end) const {
  LabeledBatch out;
  out.x = slice_rows(x, begin, end);
  out.labels = slice_rows(labels, begin, end);
  if (!mask.empty()) out.mask = slice_rows(mask, begin, end);
  out.ids.assign(ids.begin() + begin, ids.begin() + end);
  out.fs = fs;
  return out;
}

template <typename S>
LabeledBatch<S> LabeledBatch<S>::gather(std::span<const Index> rows) const {
  LabeledBatch out;
  out.x = gather_rows(x, rows);
  out.labels = gather_rows(labels, rows);
  if (!mask.empty()) out.mask = gather_rows(mask, rows);
  for (Index r : rows) out.ids.push_back(ids[r]);
  out.fs = fs;
  return out;
}

template <typename S>
LabeledBatch<S> make_batch(const std::vector<EcgRecord>& records, const std::vector<PhysioMask>* masks,
                           bool normalize) {
  if (records.empty()) throw Error("E_DATA", "dataset is empty");
  const Index N = static_cast<Index>(records.size());
  const Index C = records[0].signal.rows();
  const Index L = records[0].signal.cols();
  const Index K = static_cast<Index>(records[0].labels.size());
  if (masks && masks->size() != records.size())
    throw Error("E_MASK", "mask count " + std::to_string(masks->size()) + " does not match record count " +
                              std::to_string(records.size()));
  LabeledBatch<S> b;
  b.fs = records[0].fs;
  b.x = Tensor<S>({N, C, L});
  b.labels = Tensor<S>({N, K});
  if (masks) b.mask = Tensor<S>({N, C, L});
  for (Index i = 0; i < N; ++i) {
    const EcgRecord& r = records[i];
    if (r.signal.rows() != C || r.signal.cols() != L || static_cast<Index>(r.labels.size()) != K ||
        r.fs != records[0].fs)
      throw Error("E_SHAPE", "record " + r.record_id + " does not match the first record's shape");
    const EcgRecord n = normalize ? normalize_record(r) : r;
    for (Index c = 0; c < C; ++c)
      for (Index t = 0; t < L; ++t) b.x[(i * C + c) * L + t] = static_cast<S>(n.signal(c, t));
    for (Index k = 0; k < K; ++k) b.labels[i * K + k] = static_cast<S>(r.labels[k]);
    if (masks) {
      const PhysioMask& m = (*masks)[i];
      if (m.record_id != r.record_id)
        throw Error("E_MASK", "mask " + m.record_id + " is not aligned with record " + r.record_id);
      if (m.mask.cols() != L || (m.mask.rows() != C && m.mask.rows() != 1))
        throw Error("E_MASK", "mask shape does not match record " + r.record_id);
      for (Index c = 0; c < C; ++c)
        for (Index t = 0; t < L; ++t)
          b.mask[(i * C + c) * L + t] = static_cast<S>(m.mask(m.mask.rows() == 1 ? 0 : c, t));
    }
    b.ids.push_back(r.record_id);
  }
  return b;
}

#define CPR_INSTANTIATE_BATCH(S)                                                                  \
  template struct LabeledBatch<S>;                                                               \
  template LabeledBatch<S> make_batch(const std::vector<EcgRecord>&, const std::vector<PhysioMask>*, bool); \
  template Tensor<S> slice_rows(const Tensor<S>&, Index, Index);                                 \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);
CPR_INSTANTIATE_BATCH(float)
CPR_INSTANTIATE_BATCH(double)

}  // namespace cpr
