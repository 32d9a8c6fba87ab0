import init, { compressView, coverageCurve, heatmapRgba } from "./pkg/kvlab_wasm.js";

const $ = (id) => document.getElementById(id);

function inputs() {
  return {
    text: $("prompt").value,
    marker: $("marker").value,
    seed: BigInt($("seed").value || 0),
  };
}

function guarded(fn) {
  return () => {
    $("error").textContent = "";
    try {
      fn();
    } catch (e) {
      $("error").textContent = String(e.message ?? e);
    }
  };
}

function showCompression() {
  const { text, marker, seed } = inputs();
  const ratio = Number($("ratio").value);
  const maxNew = Number($("max-new").value);
  const view = JSON.parse(compressView(text, marker, $("policy").value, ratio, maxNew, seed));
  const bytes = new TextEncoder().encode(text);
  const box = $("tokens");
  box.replaceChildren();
  bytes.forEach((b, i) => {
    const span = document.createElement("span");
    const ch = String.fromCharCode(b);
    span.textContent = ch === "\n" ? "↵\n" : ch;
    const kept = view.kept[i];
    span.style.background = `rgba(40, 120, 220, ${0.1 + 0.6 * kept})`;
    span.style.color = kept > 0 ? "#000" : "#aaa";
    span.title = `position ${i}: kept by ${(kept * 100).toFixed(0)}% of heads`;
    box.appendChild(span);
  });
  const keptTokens = view.kept.filter((k) => k > 0).length;
  $("stats").textContent =
    `${view.policy}: ${keptTokens}/${view.prompt_len} prompt tokens touched, ` +
    `KL ${view.kl.toExponential(3)}, top-1 match ${(view.top1_match * 100).toFixed(1)}%, ` +
    `max |Δlogit| ${view.max_abs.toFixed(4)}\n` +
    `full: ${JSON.stringify(view.baseline)}  compressed: ${JSON.stringify(view.compressed)}`;
}

function showCoverage() {
  const { text, seed } = inputs();
  const view = JSON.parse(coverageCurve(text, Number($("exclude").value), seed));
  const canvas = $("coverage");
  const ctx = canvas.getContext("2d");
  const pad = 30;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.setLineDash([4, 4]);
  ctx.beginPath();
  ctx.moveTo(pad, pad + h);
  ctx.lineTo(pad + w, pad);
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.strokeStyle = "#d62728";
  ctx.lineWidth = 2;
  ctx.beginPath();
  view.points.forEach(([p, m], i) => {
    const x = pad + p * w;
    const y = pad + (1 - m) * h;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.lineWidth = 1;
  ctx.fillStyle = "#222";
  ctx.fillText("token fraction", pad + w / 2 - 30, canvas.height - 8);
  ctx.fillText("mass", 2, pad - 8);
  $("coverage-stats").textContent =
    `top 1% of tokens hold ${(view.at_01 * 100).toFixed(1)}% of the attention, ` +
    `top 20% hold ${(view.at_20 * 100).toFixed(1)}%`;
}

function showHeatmap() {
  const { text, seed } = inputs();
  const n = new TextEncoder().encode(text).length;
  const rgba = heatmapRgba(text, Number($("layer").value), Number($("head").value), seed);
  const image = new ImageData(new Uint8ClampedArray(rgba), n, n);
  const scratch = new OffscreenCanvas(n, n);
  scratch.getContext("2d").putImageData(image, 0, 0);
  const ctx = $("heatmap").getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, 384, 384);
  ctx.drawImage(scratch, 0, 0, 384, 384);
}

await init();
$("ratio").addEventListener("input", () => {
  $("ratio-value").textContent = Number($("ratio").value).toFixed(2);
});
$("run-compress").addEventListener("click", guarded(showCompression));
$("run-coverage").addEventListener("click", guarded(showCoverage));
$("run-heatmap").addEventListener("click", guarded(showHeatmap));
guarded(showCompression)();
guarded(showCoverage)();
guarded(showHeatmap)();
