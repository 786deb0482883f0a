/** Line-framed JSON transports: TCP socket or a served subprocess on stdio.
 *
 * The protocol is strictly request/response per session, so requests are
 * queued and answered in order.
 */
import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import * as net from "node:net";

import { type Response } from "./protocol.js";

export interface TcpEndpoint {
  host: string;
  port: number;
}

export interface SubprocessEndpoint {
  command: string;
  args: string[];
}

export type Endpoint = TcpEndpoint | SubprocessEndpoint;

export interface Transport {
  request(message: object): Promise<Response>;
  close(): void;
}

class LineDecoder {
  private buffer = "";

  push(chunk: string, onLine: (line: string) => void): void {
    this.buffer += chunk;
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, idx).trim();
      this.buffer = this.buffer.slice(idx + 1);
      if (line.length > 0) onLine(line);
    }
  }
}

interface Pending {
  resolve: (r: Response) => void;
  reject: (err: Error) => void;
  timer: NodeJS.Timeout;
}

abstract class QueuedTransport implements Transport {
  protected pending: Pending[] = [];
  protected decoder = new LineDecoder();
  constructor(protected timeoutMs: number) {}

  protected abstract write(line: string): void;
  abstract close(): void;

  protected onData(chunk: string): void {
    this.decoder.push(chunk, (line) => {
      const waiter = this.pending.shift();
      if (!waiter) return; // unsolicited line (e.g. listening banner): ignore
      clearTimeout(waiter.timer);
      try {
        waiter.resolve(JSON.parse(line) as Response);
      } catch (err) {
        waiter.reject(new Error(`bad JSON from server: ${line}`));
      }
    });
  }

  protected failAll(err: Error): void {
    for (const waiter of this.pending.splice(0)) {
      clearTimeout(waiter.timer);
      waiter.reject(err);
    }
  }

  request(message: object): Promise<Response> {
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        const idx = this.pending.findIndex((p) => p.timer === timer);
        if (idx >= 0) this.pending.splice(idx, 1);
        reject(new Error(`request timed out after ${this.timeoutMs} ms`));
      }, this.timeoutMs);
      this.pending.push({ resolve, reject, timer });
      this.write(JSON.stringify(message) + "\n");
    });
  }
}

export class TcpTransport extends QueuedTransport {
  private constructor(private socket: net.Socket, timeoutMs: number) {
    super(timeoutMs);
    socket.setEncoding("utf8");
    socket.on("data", (chunk: string) => this.onData(chunk));
    socket.on("error", (err) => this.failAll(err));
    socket.on("close", () => this.failAll(new Error("connection closed")));
  }

  static connect(endpoint: TcpEndpoint, timeoutMs: number): Promise<TcpTransport> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection(endpoint.port, endpoint.host);
      const onError = (err: Error) => reject(err);
      socket.once("error", onError);
      socket.once("connect", () => {
        socket.removeListener("error", onError);
        resolve(new TcpTransport(socket, timeoutMs));
      });
    });
  }

  protected write(line: string): void {
    this.socket.write(line);
  }

  close(): void {
    this.socket.end();
    this.socket.destroy();
  }
}

export class SubprocessTransport extends QueuedTransport {
  private constructor(private child: ChildProcessWithoutNullStreams, timeoutMs: number) {
    super(timeoutMs);
    child.stdout.setEncoding("utf8");
    child.stdout.on("data", (chunk: string) => this.onData(chunk));
    child.on("error", (err) => this.failAll(err));
    child.on("exit", () => this.failAll(new Error("server process exited")));
  }

  static start(endpoint: SubprocessEndpoint, timeoutMs: number): Promise<SubprocessTransport> {
    return new Promise((resolve, reject) => {
      const child = spawn(endpoint.command, endpoint.args, { stdio: ["pipe", "pipe", "pipe"] });
      child.once("error", reject);
      child.once("spawn", () => resolve(new SubprocessTransport(child, timeoutMs)));
    });
  }

  protected write(line: string): void {
    this.child.stdin.write(line);
  }

  close(): void {
    this.child.stdin.end();
    this.child.kill();
  }
}

export async function openTransport(endpoint: Endpoint, timeoutMs: number): Promise<Transport> {
  if ("port" in endpoint) {
    return TcpTransport.connect(endpoint, timeoutMs);
  }
  return SubprocessTransport.start(endpoint, timeoutMs);
}
