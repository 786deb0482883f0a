export { GridEnvBridge, type BridgeConfig, type StepResult, type MultiStepResult } from "./bridge.js";
export { checkEnv, type CheckReport } from "./checker.js";
export { openTransport, TcpTransport, SubprocessTransport, type Endpoint } from "./connection.js";
export {
  PROTOCOL_VERSION,
  ProtocolError,
  type AgentSpaces,
  type Box,
  type Response,
  type Transition,
} from "./protocol.js";
