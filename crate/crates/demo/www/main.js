import init, { chirp_log_mel, sample_mask, toy_utterance, ToyEncoder } from "./pkg/fatspeech_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// Draws a [rows, cols] matrix with time on the x axis. `overlay(row)` may
// return a CSS colour to tint a whole column.
function draw(canvas, m, { scale = 4, transpose = true, overlay = null } = {}) {
  const data = m.data();
  const [w, h] = transpose ? [m.rows, m.cols] : [m.cols, m.rows];
  canvas.width = w * scale;
  canvas.height = h * scale;
  const ctx = canvas.getContext("2d");
  let lo = Infinity, hi = -Infinity;
  for (const v of data) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi - lo || 1;
  for (let r = 0; r < m.rows; r++) {
    for (let c = 0; c < m.cols; c++) {
      const g = Math.round(255 * (data[r * m.cols + c] - lo) / span);
      ctx.fillStyle = `rgb(${g},${g},${Math.min(255, g + 40)})`;
      const [x, y] = transpose ? [r, m.cols - 1 - c] : [c, r];
      ctx.fillRect(x * scale, y * scale, scale, scale);
    }
  }
  if (overlay) {
    for (let r = 0; r < m.rows; r++) {
      const colour = overlay(r);
      if (colour) { ctx.fillStyle = colour; ctx.fillRect(r * scale, 0, scale, canvas.height); }
    }
  }
}

function guard(out, f) {
  try { f(); } catch (e) { $(out).textContent = `error: ${e.message ?? e}`; }
}

function chirp() {
  guard("chirp-out", () => {
    const m = chirp_log_mel(num("f0"), num("f1"), num("dur"), num("mels"));
    $("chirp-out").textContent = `${m.rows} frames x ${m.cols} mel bins`;
    draw($("chirp"), m, { scale: 3 });
  });
}

function mask() {
  guard("mask-out", () => {
    const utt = toy_utterance(num("utt"));
    const spec = utt.spectrogram();
    const ind = sample_mask(spec.rows, num("lambda"), num("span"), num("mseed"), $("spans").checked);
    const masked = ind.reduce((a, b) => a + b, 0);
    $("mask-out").textContent =
      `"${utt.text}": ${masked}/${spec.rows} frames masked (${(masked / spec.rows).toFixed(3)})`;
    draw($("mask"), spec, { scale: 8, overlay: (r) => ind[r] ? "rgba(230,60,40,0.55)" : null });
  });
}

let encoder = null;

function attention() {
  guard("attn-out", () => {
    encoder ??= new ToyEncoder(7);
    const m = encoder.attention(num("example"), $("stack").value, num("layer"), num("head"));
    $("attn-out").textContent =
      `step ${encoder.step}: ${m.rows}x${m.cols}, diagonal mass (band 1) ${m.diagonal(1).toFixed(3)}`;
    draw($("attn"), m, { scale: 12, transpose: false });
  });
}

function train() {
  $("attn-out").textContent = "training...";
  // let the message paint before the blocking call
  setTimeout(() => guard("attn-out", () => {
    encoder ??= new ToyEncoder(7);
    const loss = encoder.train(25);
    attention();
    $("attn-out").textContent += `, loss ${loss.toFixed(3)}`;
  }), 20);
}

await init();
$("chirp-go").onclick = chirp;
$("mask-go").onclick = mask;
$("attn-show").onclick = attention;
$("attn-train").onclick = train;
for (const id of ["lambda", "span", "mseed", "spans", "utt"]) $(id).onchange = mask;
for (const id of ["stack", "layer", "head", "example"]) $(id).onchange = attention;
chirp();
mask();
attention();
