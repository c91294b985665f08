"""From raw sensor readings to a prediction nobody but the client sees.

A synthetic IoT stream is cut into window images, the desk-sized CNN is run
in the clear for reference, then the same windows go through the dealer,
server and client over real TCP sockets on localhost.

    python demos/02_sensor_stream_to_private_verdict.py
"""

import time

from ppids import harness as H
from ppids import iot
from ppids import model as M
from ppids.engine import fixed_logits, infer_plain_float
from ppids.protocol.session import SessionConfig, run_client, run_dealer, run_server
from ppids.ring import FixedPointCodec

stream = iot.gen_synthetic_stream(seed=7, rows=1500)
train, test = iot.partition_sequences(stream, seq_len=500, seed=7)
print(f"{len(stream)} readings -> {len(train)} train rows, {len(test)} test rows")

images, labels = iot.encode_windows(test, height=32, width=32)
x = iot.to_model_input(images)[::50][:6]
print(f"{len(images)} test windows of 32x32x3; sending {len(x)} of them")
print("one window, sensor block only (1 = missing reading):")
for row in images[0, -6:, 7:24, 0]:
    print("   ", "".join("#" if v else "." for v in row))

spec = M.make_desk_spec()
spec, weights = M.fold_batchnorm(spec, M.gen_synthetic_weights(spec, seed=2))
model = M.Model(spec, weights)
codec = FixedPointCodec(10, 4)

float_pred = infer_plain_float(spec, weights, x).argmax(axis=1)
fixed_pred = codec.ring.signed(fixed_logits(spec, weights, x, codec)).argmax(axis=1)

dealer = run_dealer(seed=1, block=False)
server = run_server(model, dealer=dealer.address, quota=100, seed=2, block=False)
print(f"dealer on {dealer.address}, server on {server.address}")
t0 = time.perf_counter()
try:
    report = run_client(x, server.address, dealer.address, SessionConfig(token="gateway-3"), seed=3)
finally:
    server.stop()
    dealer.stop()
print(f"encrypted inference: {(time.perf_counter() - t0) / len(x):.2f} s per window, "
      f"{report.rounds[0]} rounds each")
for phase, secs in report.phase_totals().items():
    print(f"    {phase:13s} {secs / len(x):.4f} s")

names = M.CLASS_NAMES
print("float     :", [names[i] for i in float_pred])
print("fixed     :", [names[i] for i in fixed_pred])
print("encrypted :", [names[i] for i in report.predictions])
print(f"encrypted vs float matching: {100 * H.matching_rate(report.predictions, float_pred):.1f}%")
print("(weights are synthetic, so the verdicts are not meaningful detections)")
